use super::*;
use crate::model::{compare, Atom, CompareError, PeerId};

const Q1: &str = "SELECT friend_list FROM PERSON\nWHERE name = \"Keith\"";
const Q2: &str = "SUBSCRIBE isVacant FROM OFFICE\nWHERE location = \"S14 #06-20, NUS\"";
const Q3: &str = "SELECT CONT location FROM PERSON\nWHERE name = \"Keith\"\nSAMPLE PERIOD 1 min LIFETIME 2 hours";

fn keith() -> Predicate {
    Predicate::single(Atom::new("name", CompareOp::Eq, AttributeValue::text("Keith")))
}

#[test]
fn query_one() {
    let ast = parse(Q1).unwrap();
    assert_eq!(
        ast,
        QueryAst {
            kind: QueryKind::Select,
            continuous: false,
            projection: vec!["friend_list".into()],
            domain: "PERSON".into(),
            predicate: keith(),
            sample_period: None,
            lifetime: None,
            ttl: DEFAULT_TTL,
        }
    );
}

#[test]
fn query_two() {
    let ast = parse(Q2).unwrap();
    assert_eq!(ast.kind, QueryKind::Subscribe);
    assert_eq!(ast.projection, ["isVacant"]);
    assert_eq!(ast.domain, "OFFICE");
    assert_eq!(
        ast.predicate,
        Predicate::single(Atom::new(
            "location",
            CompareOp::Eq,
            AttributeValue::text("S14 #06-20, NUS")
        ))
    );
}

#[test]
fn query_three() {
    let ast = parse(Q3).unwrap();
    assert!(ast.continuous);
    assert_eq!(ast.projection, ["location"]);
    assert_eq!(ast.sample_period.unwrap().millis(), 60_000);
    assert_eq!(ast.lifetime.unwrap().millis(), 7_200_000);
    assert_eq!(ast.predicate, keith());
}

#[test]
fn curly_quotes_are_string_delimiters() {
    let ast = parse("SELECT friend_list FROM PERSON WHERE name = \u{201C}Keith\u{201D}").unwrap();
    assert_eq!(ast, parse(Q1).unwrap());
}

#[test]
fn keywords_are_case_insensitive_identifiers_are_not() {
    let ast = parse("select Friend_List from PERSON where Name = \"Keith\"").unwrap();
    assert_eq!(ast.projection, ["Friend_List"]);
    assert_eq!(ast.predicate.atoms[0].attribute, "Name");
}

#[test]
fn empty_projection_is_a_syntax_error() {
    match parse("SELECT FROM PERSON") {
        Err(ParseError::Syntax {
            line,
            column,
            expected,
            found,
        }) => {
            assert_eq!((line, column), (1, 8));
            assert_eq!(expected, ["identifier"]);
            assert_eq!(found, "`FROM`");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn error_positions_span_lines() {
    let err = parse("SELECT a FROM P\nWHERE b = ").unwrap_err();
    assert!(matches!(err, ParseError::Syntax { line: 2, column: 11, .. }), "{err:?}");
    let err = parse("SELECT a FROM P garbage").unwrap_err();
    match err {
        ParseError::Syntax { expected, .. } => assert_eq!(expected, ["WHERE", "end of input"]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn cont_requires_sample_period_and_subscribe_rejects_it() {
    assert!(parse("SELECT CONT a FROM P").is_err());
    assert!(parse("SUBSCRIBE e FROM P SAMPLE PERIOD 1 s LIFETIME 1 s").is_err());
    let ast = parse("SUBSCRIBE e FROM P LIFETIME 10 min").unwrap();
    assert_eq!(ast.lifetime.unwrap().millis(), 600_000);
    assert!(parse("SELECT a FROM P LIFETIME 1 s").is_err());
}

#[test]
fn subscribe_takes_one_event() {
    assert!(parse("SUBSCRIBE a, b FROM P").is_err());
}

#[test]
fn durations() {
    assert_eq!(parse_duration("1 min").unwrap().millis(), 60_000);
    assert_eq!(parse_duration("2 hours").unwrap().millis(), 7_200_000);
    assert_eq!(parse_duration("0 s").unwrap().millis(), 0);
    assert_eq!(parse_duration("1 hour").unwrap().millis(), 3_600_000);
    assert_eq!(parse_duration("250 ms").unwrap().millis(), 250);
    assert_eq!(parse_duration("3 secs").unwrap().millis(), 3_000);
    assert_eq!(parse_duration("5 MINS").unwrap().millis(), 300_000);
    assert!(matches!(parse_duration("1 fortnight"), Err(ParseError::UnknownUnit { .. })));
    assert!(matches!(parse_duration("1.5 min"), Err(ParseError::NonIntegerMagnitude { .. })));
    assert!(matches!(parse_duration("1 min 2 s"), Err(ParseError::Syntax { .. })));
}

#[test]
fn string_escapes() {
    let ast = parse(r#"SELECT a FROM P WHERE b = "say \"hi\" \\ ok""#).unwrap();
    assert_eq!(ast.predicate.atoms[0].literal, AttributeValue::text(r#"say "hi" \ ok"#));
    assert_eq!(parse(&render(&ast)).unwrap(), ast);
    assert!(parse(r#"SELECT a FROM P WHERE b = "\n""#).is_err());
    assert!(parse(r#"SELECT a FROM P WHERE b = "open"#).is_err());
}

#[test]
fn literals_of_every_kind() {
    let ast = parse("SELECT a FROM P WHERE n >= -2.5 AND b = TRUE AND c != false AND d < 10").unwrap();
    let lits: Vec<_> = ast.predicate.atoms.iter().map(|a| a.literal.clone()).collect();
    assert_eq!(
        lits,
        [
            AttributeValue::Number(-2.5),
            AttributeValue::Boolean(true),
            AttributeValue::Boolean(false),
            AttributeValue::Number(10.0)
        ]
    );
    assert_eq!(parse(&render(&ast)).unwrap(), ast);
}

fn person_schema() -> GlobalSchema {
    GlobalSchema {
        domain_name: "PERSON".into(),
        attributes: vec![
            AttributeDef::new("name", ValueKind::Text),
            AttributeDef::new("location", ValueKind::Text),
            AttributeDef::new("friend_list", ValueKind::ListOfText),
            AttributeDef::new("age", ValueKind::Number),
            AttributeDef::event("isEating"),
        ],
        member_count: 1,
    }
}

#[test]
fn validate_query_one() {
    let globals = [person_schema()];
    let typed = validate(&parse(Q1).unwrap(), &globals).unwrap();
    assert_eq!(typed.projection[0].kind, ValueKind::ListOfText);
    assert_eq!(
        validate(&parse(Q1).unwrap(), &[]),
        Err(vec![ValidationError::UnknownDomain("PERSON".into())])
    );
}

#[test]
fn validation_errors_are_collected() {
    let globals = [person_schema()];
    let ast = parse("SELECT height, name FROM PERSON WHERE weight = 3 AND age = \"x\" AND name < \"Keith\"").unwrap();
    let errs = validate(&ast, &globals).unwrap_err();
    assert_eq!(errs.len(), 4, "{errs:?}");
    assert!(matches!(errs[0], ValidationError::UnknownAttribute { .. }));
    assert!(matches!(errs[1], ValidationError::UnknownAttribute { .. }));
    assert!(matches!(errs[2], ValidationError::KindMismatch { .. }));
    assert!(matches!(errs[3], ValidationError::UnsupportedOperator { .. }));

    let errs = validate(&parse("SUBSCRIBE name FROM PERSON").unwrap(), &globals).unwrap_err();
    assert_eq!(errs, [ValidationError::SubscribeOnNonEvent("name".into())]);
    assert!(validate(&parse("SUBSCRIBE isEating FROM PERSON").unwrap(), &globals).is_ok());
}

fn sample_literal(kind: ValueKind) -> AttributeValue {
    match kind {
        ValueKind::Text => AttributeValue::text("x"),
        ValueKind::Number => AttributeValue::Number(1.0),
        ValueKind::Boolean => AttributeValue::Boolean(true),
        ValueKind::ListOfText => AttributeValue::ListOfText(vec!["x".into()]),
    }
}

/// The validator's verdict on every (attribute kind, operator) pair agrees
/// with what `compare` would do at run time.
#[test]
fn operator_support_agrees_with_compare() {
    let kinds = [ValueKind::Text, ValueKind::Number, ValueKind::Boolean, ValueKind::ListOfText];
    for kind in kinds {
        let schema = GlobalSchema {
            domain_name: "D".into(),
            attributes: vec![AttributeDef::new("a", kind)],
            member_count: 0,
        };
        for op in CompareOp::ALL {
            let lit = sample_literal(kind);
            let ast = QueryAst {
                kind: QueryKind::Select,
                continuous: false,
                projection: vec!["a".into()],
                domain: "D".into(),
                predicate: Predicate::single(Atom::new("a", op, lit.clone())),
                sample_period: None,
                lifetime: None,
                ttl: 1,
            };
            let accepted = validate(&ast, [&schema]).is_ok();
            let runtime = compare(&lit, op, &lit);
            assert_eq!(
                accepted,
                !matches!(runtime, Err(CompareError::UnsupportedOperator { .. })),
                "{kind} {op}"
            );
        }
    }
}

fn mapping(pairs: &[(&str, &str)]) -> SchemaMapping {
    SchemaMapping {
        peer: PeerId(1),
        global_domain: "PERSON".into(),
        local_domain: "PEOPLE".into(),
        pairs: pairs.iter().map(|(g, l)| (g.to_string(), l.to_string())).collect(),
    }
}

#[test]
fn rewrite_renames_projection_and_predicate() {
    let ast = parse("SELECT name FROM PERSON WHERE name = \"Keith\"").unwrap();
    let local = rewrite_to_local(&ast, &mapping(&[("name", "personName")]));
    assert_eq!(local.ast.projection, ["personName"]);
    assert_eq!(local.ast.predicate.atoms[0].attribute, "personName");
    assert_eq!(local.ast.domain, "PEOPLE");
    assert!(local.unmapped.is_empty());
}

#[test]
fn rewrite_identity_is_identity() {
    let ast = parse(Q1).unwrap();
    let m = SchemaMapping {
        peer: PeerId(1),
        global_domain: "PERSON".into(),
        local_domain: "PERSON".into(),
        pairs: [("name", "name"), ("friend_list", "friend_list")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
    };
    let local = rewrite_to_local(&ast, &m);
    assert_eq!(local.ast, ast);
    assert!(local.unmapped.is_empty());
}

#[test]
fn rewrite_flags_every_unmapped_attribute() {
    // 5-attribute schema, mapping covers only `name`
    let all = ["name", "age", "location", "mood", "height"];
    let m = mapping(&[("name", "personName")]);
    let ast = parse("SELECT name, age, location, mood, height FROM PERSON").unwrap();
    let local = rewrite_to_local(&ast, &m);
    for (global, got) in all.iter().zip(&local.ast.projection) {
        match m.local_name(global) {
            Some(l) => {
                assert_eq!(got, l);
                assert!(!local.unmapped.contains(*global));
            }
            None => {
                assert_eq!(got, global);
                assert!(local.unmapped.contains(*global));
            }
        }
    }
    assert_eq!(local.unmapped.len(), 4);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn ident() -> impl Strategy<Value = String> {
        "[a-zA-Z_][a-zA-Z0-9_]{0,8}".prop_filter("keyword", |s| !is_keyword(s))
    }

    fn literal() -> impl Strategy<Value = AttributeValue> {
        prop_oneof![
            "[ -~]{0,12}".prop_map(AttributeValue::Text),
            (-1e9f64..1e9).prop_map(AttributeValue::Number),
            (-1000i64..1000).prop_map(|n| AttributeValue::Number(n as f64)),
            any::<bool>().prop_map(AttributeValue::Boolean),
        ]
    }

    fn op() -> impl Strategy<Value = CompareOp> {
        prop::sample::select(CompareOp::ALL.to_vec())
    }

    fn duration() -> impl Strategy<Value = Duration> {
        (
            0u64..10_000,
            prop::sample::select(vec![TimeUnit::Millis, TimeUnit::Seconds, TimeUnit::Minutes, TimeUnit::Hours]),
        )
            .prop_map(|(magnitude, unit)| Duration { magnitude, unit })
    }

    pub(crate) fn ast() -> impl Strategy<Value = QueryAst> {
        let atoms = prop::collection::vec((ident(), op(), literal()), 0..4);
        (
            0u8..3,
            prop::collection::vec(ident(), 1..4),
            ident(),
            atoms,
            duration(),
            duration(),
            any::<bool>(),
        )
            .prop_map(|(shape, projection, domain, atoms, period, life, with_life)| {
                let predicate = Predicate {
                    atoms: atoms.into_iter().map(|(a, o, l)| Atom::new(a, o, l)).collect(),
                };
                match shape {
                    0 => QueryAst {
                        kind: QueryKind::Select,
                        continuous: false,
                        projection,
                        domain,
                        predicate,
                        sample_period: None,
                        lifetime: None,
                        ttl: DEFAULT_TTL,
                    },
                    1 => QueryAst {
                        kind: QueryKind::Select,
                        continuous: true,
                        projection,
                        domain,
                        predicate,
                        sample_period: Some(period),
                        lifetime: Some(life),
                        ttl: DEFAULT_TTL,
                    },
                    _ => QueryAst {
                        kind: QueryKind::Subscribe,
                        continuous: false,
                        projection: projection[..1].to_vec(),
                        domain,
                        predicate,
                        sample_period: None,
                        lifetime: with_life.then_some(life),
                        ttl: DEFAULT_TTL,
                    },
                }
            })
    }

    proptest! {
        #[test]
        fn parse_inverts_render(ast in ast()) {
            let text = render(&ast);
            prop_assert_eq!(parse(&text).unwrap(), ast);
        }

        #[test]
        fn render_parse_is_idempotent(ast in ast()) {
            let once = render(&parse(&render(&ast)).unwrap());
            let twice = render(&parse(&once).unwrap());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn rewrite_then_inverse_restores(ast in ast(), renames in prop::collection::vec(("[a-z]{1,6}", "[A-Z]{1,6}"), 0..4)) {
            let mut m = mapping(&[]);
            m.global_domain = ast.domain.clone();
            for (name, (_, local)) in ast.projection.iter().zip(&renames) {
                let local = format!("L{local}");
                if m.global_name(&local).is_none() && !m.pairs.contains_key(name) {
                    m.pairs.insert(name.clone(), local);
                }
            }
            let there = rewrite_to_local(&ast, &m);
            let back = rewrite_to_local(&there.ast, &m.inverse());
            for (orig, restored) in ast.projection.iter().zip(&back.ast.projection) {
                if m.pairs.contains_key(orig) {
                    prop_assert_eq!(orig, restored);
                }
            }
            prop_assert_eq!(&back.ast.domain, &ast.domain);
        }

        #[test]
        fn parser_never_panics(text in "[ -~\n]{0,60}") {
            let _ = parse(&text);
        }
    }
}
