//! On-disk benchmark fixture: three small databases, each with a primary
//! instance and a two-variant test suite, a catalog, a training library, a
//! 20-question dev set with gold SQL and a scripted backend that answers
//! every question with its gold query.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rusqlite::{params_from_iter, Connection};
use serde_json::json;

use apsql_core::schema_catalog::{self, DatabaseSchema};

pub const DBS: [&str; 3] = ["concert_singer", "pets_1", "school"];

type Row = Vec<rusqlite::types::Value>;

fn int(v: i64) -> rusqlite::types::Value {
    rusqlite::types::Value::Integer(v)
}
fn real(v: f64) -> rusqlite::types::Value {
    rusqlite::types::Value::Real(v)
}
fn text(v: &str) -> rusqlite::types::Value {
    rusqlite::types::Value::Text(v.to_string())
}

const CONCERT_DDL: &str = "
CREATE TABLE stadium (stadium_id INTEGER PRIMARY KEY, name TEXT, capacity INTEGER);
CREATE TABLE singer (singer_id INTEGER PRIMARY KEY, name TEXT, country TEXT, age REAL);
CREATE TABLE concert (
  concert_id INTEGER PRIMARY KEY,
  concert_name TEXT,
  year INTEGER,
  stadium_id INTEGER REFERENCES stadium(stadium_id)
);";

const PETS_DDL: &str = "
CREATE TABLE owners (owner_id INTEGER PRIMARY KEY, name TEXT, city TEXT);
CREATE TABLE pets (
  pet_id INTEGER PRIMARY KEY,
  pet_type TEXT,
  weight REAL,
  owner_id INTEGER REFERENCES owners(owner_id)
);";

const SCHOOL_DDL: &str = "
CREATE TABLE student (student_id INTEGER PRIMARY KEY, name TEXT, major TEXT, gpa REAL);
CREATE TABLE course (course_id INTEGER PRIMARY KEY, title TEXT, credits INTEGER);
CREATE TABLE enrollment (
  student_id INTEGER REFERENCES student(student_id),
  course_id INTEGER REFERENCES course(course_id),
  grade TEXT
);";

/// Table contents for instance `v` (0 = primary, 1 and 2 = suite variants).
/// Variant 2 of `concert_singer` holds a singer aged 20.5, which separates
/// `age > 20` from `age >= 21`.
fn rows(db: &str, v: i64) -> Vec<(&'static str, Vec<Row>)> {
    match db {
        "concert_singer" => {
            let stadiums = [
                "Stark Park",
                "Somerset Park",
                "Glebe Park",
                "Recreation Park",
            ]
            .iter()
            .enumerate()
            .map(|(i, n)| {
                vec![
                    int(i as i64 + 1),
                    text(n),
                    int(4000 + 1500 * ((i as i64 + v) % 4)),
                ]
            })
            .collect();
            let mut singers: Vec<(&str, &str, f64)> = vec![
                ("Joe Sharp", "Netherlands", 52.0),
                ("Timbaland", "United States", 32.0),
                ("Justin Brown", "France", 29.0),
                ("Rose White", "France", 41.0),
                ("John Nizinik", "France", 43.0),
                ("Tribal King", "France", 25.0),
                ("Kim Lee", "United States", 19.0),
            ];
            match v {
                1 => {
                    singers[6].2 = 22.0;
                    singers.push(("Ana Ruiz", "Spain", 37.0));
                }
                2 => singers.push(("Lea Vos", "Netherlands", 20.5)),
                _ => {}
            }
            let singers = singers
                .iter()
                .enumerate()
                .map(|(i, (n, c, a))| vec![int(i as i64 + 1), text(n), text(c), real(*a)])
                .collect();
            let concerts = (0..6 + v)
                .map(|i| {
                    vec![
                        int(i + 1),
                        text(&format!("Show {}", i + 1)),
                        int(2014 + (i + v) % 3),
                        int(1 + (i * (v + 1)) % 3),
                    ]
                })
                .collect();
            vec![
                ("stadium", stadiums),
                ("singer", singers),
                ("concert", concerts),
            ]
        }
        "pets_1" => {
            let mut owners = vec![
                ("Ada", "Austin"),
                ("Ben", "Boston"),
                ("Cy", "Austin"),
                ("Dee", "Denver"),
            ];
            if v == 1 {
                owners.push(("Eve", "Austin"));
            }
            if v == 2 {
                owners[1].1 = "Austin";
            }
            let owners = owners
                .iter()
                .enumerate()
                .map(|(i, (n, c))| vec![int(i as i64 + 1), text(n), text(c)])
                .collect();
            let base: [(&str, f64, i64); 6] = [
                ("dog", 12.0, 1),
                ("cat", 3.5, 1),
                ("dog", 20.25, 2),
                ("cat", 4.0, 3),
                ("bird", 0.5, 2),
                ("dog", 9.0, 3),
            ];
            let pets = base
                .iter()
                .enumerate()
                .map(|(i, (t, w, o))| {
                    let owner = if v == 2 && i == 3 { 4 } else { *o };
                    vec![int(i as i64 + 1), text(t), real(w + v as f64), int(owner)]
                })
                .collect();
            vec![("owners", owners), ("pets", pets)]
        }
        "school" => {
            let students: Vec<Row> = [
                ("Alice", "Physics", 3.9),
                ("Bob", "History", 2.8),
                ("Chen", "Physics", 3.4),
                ("Dara", "Biology", 3.1),
                ("Eli", "History", 3.6),
            ]
            .iter()
            .enumerate()
            .map(|(i, (n, m, g))| {
                vec![
                    int(i as i64 + 1),
                    text(n),
                    text(m),
                    real(g - 0.1 * v as f64),
                ]
            })
            .collect();
            let courses = [
                ("Mechanics", 4),
                ("World History", 3),
                ("Genetics", 5),
                ("Writing", 2),
            ]
            .iter()
            .enumerate()
            .map(|(i, (t, c))| {
                vec![
                    int(i as i64 + 1),
                    text(t),
                    int(c + (v % 2) * (i as i64 % 2)),
                ]
            })
            .collect();
            let grades = ["A", "B", "C"];
            let enrollment = (0..8i64)
                .map(|i| {
                    vec![
                        int(1 + (i + v) % 5),
                        int(1 + (i * 3 + v) % 4),
                        text(grades[((i + v) % 3) as usize]),
                    ]
                })
                .collect();
            vec![
                ("student", students),
                ("course", courses),
                ("enrollment", enrollment),
            ]
        }
        other => panic!("unknown fixture db {other}"),
    }
}

fn ddl(db: &str) -> &'static str {
    match db {
        "concert_singer" => CONCERT_DDL,
        "pets_1" => PETS_DDL,
        "school" => SCHOOL_DDL,
        other => panic!("unknown fixture db {other}"),
    }
}

pub fn build_db(path: &Path, db: &str, variant: i64) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let _ = std::fs::remove_file(path);
    let mut conn = Connection::open(path).unwrap();
    conn.execute_batch(ddl(db)).unwrap();
    let tx = conn.transaction().unwrap();
    for (table, table_rows) in rows(db, variant) {
        for row in table_rows {
            let marks = vec!["?"; row.len()].join(", ");
            tx.execute(
                &format!("INSERT INTO {table} VALUES ({marks})"),
                params_from_iter(row),
            )
            .unwrap();
        }
    }
    tx.commit().unwrap();
}

/// (db_id, question, gold SQL)
pub const DEV: [(&str, &str, &str); 20] = [
    ("concert_singer", "How many singers are there?", "SELECT count(*) FROM singer"),
    ("concert_singer", "List the names of singers older than 20.", "SELECT name FROM singer WHERE age > 20"),
    ("concert_singer", "What is the average age of singers from France?", "SELECT avg(age) FROM singer WHERE country = 'France'"),
    ("concert_singer", "List all singer names ordered by age descending.", "SELECT name FROM singer ORDER BY age DESC"),
    ("concert_singer", "What is the name of the stadium with the largest capacity?", "SELECT name FROM stadium ORDER BY capacity DESC LIMIT 1"),
    ("concert_singer", "Show each stadium name and the number of concerts held there.", "SELECT T2.name, count(*) FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id GROUP BY T1.stadium_id"),
    ("concert_singer", "Which countries have more than one singer?", "SELECT country FROM singer GROUP BY country HAVING count(*) > 1"),
    ("pets_1", "How many pets are there?", "SELECT count(*) FROM pets"),
    ("pets_1", "What is the average weight of dogs?", "SELECT avg(weight) FROM pets WHERE pet_type = 'dog'"),
    ("pets_1", "List the names of owners who live in Austin.", "SELECT name FROM owners WHERE city = 'Austin'"),
    ("pets_1", "Find the names of owners who have at least one cat.", "SELECT DISTINCT T1.name FROM owners AS T1 JOIN pets AS T2 ON T1.owner_id = T2.owner_id WHERE T2.pet_type = 'cat'"),
    ("pets_1", "What is the maximum pet weight for each pet type?", "SELECT pet_type, max(weight) FROM pets GROUP BY pet_type"),
    ("pets_1", "Find the names of owners without any pet.", "SELECT name FROM owners WHERE owner_id NOT IN (SELECT owner_id FROM pets)"),
    ("school", "How many students are there?", "SELECT count(*) FROM student"),
    ("school", "List the titles of courses worth more than 3 credits.", "SELECT title FROM course WHERE credits > 3"),
    ("school", "What is the highest GPA among students?", "SELECT max(gpa) FROM student"),
    ("school", "List the names of students majoring in Physics.", "SELECT name FROM student WHERE major = 'Physics'"),
    ("school", "Show each course title and how many students are enrolled.", "SELECT T1.title, count(*) FROM course AS T1 JOIN enrollment AS T2 ON T1.course_id = T2.course_id GROUP BY T1.course_id"),
    ("school", "Find the names of students who got an A in any course.", "SELECT DISTINCT T1.name FROM student AS T1 JOIN enrollment AS T2 ON T1.student_id = T2.student_id WHERE T2.grade = 'A'"),
    ("school", "List student names sorted by GPA.", "SELECT name FROM student ORDER BY gpa"),
];

pub const TRAIN: [(&str, &str, &str); 9] = [
    (
        "concert_singer",
        "How many concerts are there?",
        "SELECT count(*) FROM concert",
    ),
    (
        "concert_singer",
        "What are the names of singers from France?",
        "SELECT name FROM singer WHERE country = 'France'",
    ),
    (
        "concert_singer",
        "Show the stadium names with capacity above 5000.",
        "SELECT name FROM stadium WHERE capacity > 5000",
    ),
    (
        "pets_1",
        "How many dogs are there?",
        "SELECT count(*) FROM pets WHERE pet_type = 'dog'",
    ),
    (
        "pets_1",
        "List the owners from Boston.",
        "SELECT name FROM owners WHERE city = 'Boston'",
    ),
    (
        "pets_1",
        "What is the total weight of all pets?",
        "SELECT sum(weight) FROM pets",
    ),
    (
        "school",
        "How many courses are there?",
        "SELECT count(*) FROM course",
    ),
    (
        "school",
        "List the names of History majors.",
        "SELECT name FROM student WHERE major = 'History'",
    ),
    (
        "school",
        "What is the average GPA of students?",
        "SELECT avg(gpa) FROM student",
    ),
];

pub fn question_id(i: usize) -> String {
    format!("q{i:04}")
}

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
    pub schemas: Vec<DatabaseSchema>,
}

impl Fixture {
    pub fn build() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut schemas = Vec::new();
        for db in DBS {
            let primary = root.join("database").join(db).join(format!("{db}.sqlite"));
            build_db(&primary, db, 0);
            for v in 1..=2 {
                build_db(
                    &root
                        .join("test_suite")
                        .join(db)
                        .join(format!("v{v}.sqlite")),
                    db,
                    v,
                );
            }
            schemas.push(schema_catalog::introspect_database(&primary).unwrap());
        }
        let catalog = schema_catalog::to_benchmark_json(&schemas);
        std::fs::write(
            root.join("tables.json"),
            serde_json::to_string_pretty(&catalog).unwrap(),
        )
        .unwrap();

        let train: Vec<_> = TRAIN
            .iter()
            .map(|(db, q, sql)| json!({"db_id": db, "question": q, "query": sql}))
            .collect();
        std::fs::write(
            root.join("train.json"),
            serde_json::to_string_pretty(&train).unwrap(),
        )
        .unwrap();
        let dev: Vec<_> = DEV
            .iter()
            .map(|(db, q, sql)| json!({"db_id": db, "question": q, "query": sql}))
            .collect();
        std::fs::write(
            root.join("dev.json"),
            serde_json::to_string_pretty(&dev).unwrap(),
        )
        .unwrap();

        let fx = Self {
            _dir: dir,
            root,
            schemas,
        };
        fx.write_script("script.json", &BTreeMap::new());
        fx.write_config("apsql.toml", "script.json", true);
        fx
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.path("apsql.toml")
    }

    /// Rules script answering each dev question with its gold SQL, or with
    /// the override in `wrong` keyed by question index.
    pub fn write_script(&self, name: &str, wrong: &BTreeMap<usize, &str>) {
        let mut rules = Vec::new();
        for (i, (_, q, gold)) in DEV.iter().enumerate() {
            let sql = wrong.get(&i).copied().unwrap_or(gold);
            let reply = format!("Step by step.\n```sql\n{sql}\n```");
            for tail in ["Reasoning:", "Graph:"] {
                rules.push(json!({"contains": [format!("Question: {q}\n{tail}")], "reply": reply}));
            }
        }
        // The column-vote exemplar shows a `singer` table, so that rule goes
        // last or it would shadow the others.
        let mut tables: Vec<_> = self.schemas.iter().flat_map(|s| &s.tables).collect();
        tables.sort_by_key(|t| t.name == "singer");
        for t in tables {
            let cols: Vec<&str> = t.column_names().collect();
            rules.push(json!({
                "contains": ["Columns: a, b", format!("CREATE TABLE {} (", t.name)],
                "reply": format!("Columns: {}", cols.join(", ")),
            }));
        }
        rules.push(json!({"contains": ["Score each table"], "reply": "Score: 8"}));
        let script = json!({ "rules": rules });
        std::fs::write(
            self.path(name),
            serde_json::to_string_pretty(&script).unwrap(),
        )
        .unwrap();
    }

    pub fn write_config(&self, name: &str, script: &str, with_suite: bool) {
        let suite = if with_suite {
            "suite_root = \"test_suite\"\n"
        } else {
            ""
        };
        let text = format!(
            "catalog = \"tables.json\"\nexamples = \"train.json\"\ndb_root = \"database\"\n{suite}\
             runs_dir = \"runs\"\nscript = \"{script}\"\nworkers = 4\n\n[backend]\nmodel_name = \"scripted\"\napi_key_env = \"\"\n"
        );
        std::fs::write(self.path(name), text).unwrap();
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.path("runs").join(run_id)
    }
}
