use std::collections::BTreeSet;

use proptest::prelude::*;
use serde_json::json;

use apsql_core::example_store::{lexical_similarity, token_set};
use apsql_core::prompt_engine::extract_sql;
use apsql_core::schema_catalog::{
    parse_benchmark_catalog, to_benchmark_json, DatabaseSchema, SerializationStyle,
};
use apsql_core::sql_exec_eval::{results_match, Cell, ResultTable};
use apsql_core::sql_scan::has_top_level_order_by;

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,7}"
}

fn cell() -> impl Strategy<Value = Cell> {
    prop_oneof![
        Just(Cell::Null),
        (-1000i64..1000).prop_map(Cell::Integer),
        (-1.0e6f64..1.0e6).prop_map(Cell::Real),
        "[a-z ]{0,6}".prop_map(Cell::Text),
    ]
}

fn table(ordered: bool) -> impl Strategy<Value = ResultTable> {
    (1usize..4).prop_flat_map(move |cols| {
        prop::collection::vec(prop::collection::vec(cell(), cols), 0..6)
            .prop_map(move |rows| ResultTable::new(cols, rows, ordered))
    })
}

/// Random schema built through the benchmark JSON layout so it passes the
/// same validation as a real catalog.
fn schema() -> impl Strategy<Value = DatabaseSchema> {
    let tables = prop::collection::btree_set(ident(), 1..5);
    tables
        .prop_flat_map(|names| {
            let names: Vec<String> = names.into_iter().collect();
            let cols = names
                .iter()
                .map(|_| prop::collection::btree_set(ident(), 1..5))
                .collect::<Vec<_>>();
            (
                Just(names),
                cols,
                any::<prop::sample::Index>(),
                any::<bool>(),
            )
        })
        .prop_map(|(names, cols, pick, with_fk)| {
            let mut columns = vec![json!([-1, "*"])];
            let mut types = vec![json!("text")];
            let mut pks = Vec::new();
            for (ti, cs) in cols.iter().enumerate() {
                pks.push(columns.len());
                for (ci, c) in cs.iter().enumerate() {
                    columns.push(json!([ti, c]));
                    types.push(json!(if ci == 0 { "number" } else { "text" }));
                }
            }
            let mut fks = Vec::new();
            if with_fk && names.len() > 1 {
                // Last column of some table points at the first table's key.
                let ti = 1 + pick.index(names.len() - 1);
                let from = pks[ti] + cols[ti].len() - 1;
                fks.push(json!([from, pks[0]]));
            }
            let raw = json!([{
                "db_id": "gen",
                "table_names_original": names,
                "table_names": names,
                "column_names_original": columns,
                "column_names": columns,
                "column_types": types,
                "primary_keys": pks,
                "foreign_keys": fks,
            }]);
            parse_benchmark_catalog(&raw.to_string()).unwrap().remove(0)
        })
}

proptest! {
    #[test]
    fn fenced_sql_is_recovered(cols in prop::collection::vec(ident(), 1..4), t in ident(), chatter in "[A-Za-z ,.]{0,30}") {
        let sql = format!("SELECT {} FROM {t}", cols.join(", "));
        let reply = format!("{chatter}\n```sql\n{sql}\n```\n{chatter}");
        prop_assert_eq!(extract_sql(&reply).unwrap(), sql);
    }

    #[test]
    fn extraction_is_idempotent(reply in "[A-Za-z0-9 ,.;*()'\n`]{0,80}") {
        if let Ok(once) = extract_sql(&reply) {
            prop_assert_eq!(extract_sql(&once).unwrap(), once);
        }
    }

    #[test]
    fn bare_statement_stops_at_terminator(t in ident(), lit in "[a-z;]{0,5}", tail in "[A-Za-z ]{0,20}") {
        let sql = format!("SELECT * FROM {t} WHERE x = '{lit}'");
        let reply = format!("Answer: {sql}; {tail}");
        prop_assert_eq!(extract_sql(&reply).unwrap(), sql);
    }

    #[test]
    fn results_match_is_reflexive(a in table(false), b in table(true)) {
        prop_assert!(results_match(&a, &a));
        prop_assert!(results_match(&b, &b));
    }

    #[test]
    fn results_match_is_symmetric(ordered in any::<bool>(), a in table(false), b in table(false)) {
        let a = ResultTable { ordered, ..a };
        let b = ResultTable { ordered, ..b };
        prop_assert_eq!(results_match(&a, &b), results_match(&b, &a));
    }

    #[test]
    fn unordered_match_ignores_row_order(a in table(false), seed in any::<u64>()) {
        let mut rows = a.rows.clone();
        // Deterministic shuffle from the seed.
        let mut s = seed | 1;
        for i in (1..rows.len()).rev() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            rows.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let shuffled = ResultTable::new(a.columns, rows, false);
        prop_assert!(results_match(&shuffled, &a));
    }

    #[test]
    fn integral_reals_equal_integers(n in -1_000_000i64..1_000_000) {
        let i = ResultTable::new(1, vec![vec![Cell::Integer(n)]], false);
        let r = ResultTable::new(1, vec![vec![Cell::Real(n as f64)]], false);
        prop_assert!(results_match(&i, &r));
    }

    #[test]
    fn similarity_is_symmetric_and_bounded(a in "[a-z ]{0,40}", b in "[a-z ]{0,40}") {
        let ab = lexical_similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, lexical_similarity(&b, &a));
        prop_assert_eq!(lexical_similarity(&a, &a), 1.0);
    }

    #[test]
    fn similarity_matches_set_oracle(a in "[a-e ]{0,20}", b in "[a-e ]{0,20}") {
        let words = |s: &str| s.split(' ').filter(|w| !w.is_empty()).map(String::from).collect::<BTreeSet<_>>();
        let (x, y) = (words(&a), words(&b));
        prop_assert_eq!(token_set(&a), x.clone());
        let expected = if x.is_empty() && y.is_empty() {
            1.0
        } else {
            x.intersection(&y).count() as f64 / x.union(&y).count() as f64
        };
        prop_assert_eq!(lexical_similarity(&a, &b), expected);
    }

    #[test]
    fn catalog_json_round_trips(s in schema()) {
        let again = parse_benchmark_catalog(&to_benchmark_json(std::slice::from_ref(&s)).to_string()).unwrap();
        prop_assert_eq!(again, vec![s]);
    }

    #[test]
    fn full_projection_is_identity(s in schema()) {
        prop_assert_eq!(s.project(&s.full_selection()).unwrap(), s);
    }

    #[test]
    fn projection_is_a_subschema(s in schema(), keep in prop::collection::vec(any::<prop::sample::Index>(), 1..6)) {
        let mut sel = s.full_selection();
        let names: Vec<String> = sel.keys().cloned().collect();
        let chosen: BTreeSet<usize> = keep.iter().map(|i| i.index(names.len())).collect();
        sel.retain(|t, _| chosen.contains(&names.iter().position(|n| n == t).unwrap()));
        for cols in sel.values_mut() {
            let first = cols.iter().next().cloned().unwrap();
            cols.retain(|c| c.len() % 2 == 0 || *c == first);
        }
        let p = s.project(&sel).unwrap();
        prop_assert!(p.is_subschema_of(&s));
        prop_assert_eq!(p.tables.len(), sel.len());
        // Serialization mentions only kept tables.
        let text = p.serialize(SerializationStyle::CompactList);
        for t in &s.tables {
            prop_assert_eq!(text.lines().any(|l| l.starts_with(&format!("{}(", t.name))), sel.contains_key(&t.name));
        }
        for fk in &p.foreign_keys {
            prop_assert!(p.table(&fk.from_column.table).is_some() && p.table(&fk.to_column.table).is_some());
        }
    }

    #[test]
    fn order_by_only_counts_at_top_level(t in ident(), c in ident(), outer in any::<bool>(), inner in any::<bool>()) {
        let sub = format!("SELECT {c} FROM {t}{}", if inner { format!(" ORDER BY {c}") } else { String::new() });
        let sql = format!("SELECT * FROM ({sub}) AS s{}", if outer { " order  by 1" } else { "" });
        prop_assert_eq!(has_top_level_order_by(&sql), outer);
        let quoted = format!("SELECT '{sub} ORDER BY x' FROM {t}");
        prop_assert!(!has_top_level_order_by(&quoted));
    }
}
