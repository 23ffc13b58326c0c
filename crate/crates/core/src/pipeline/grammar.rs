//! Strict parsers for the stage output grammars. Anything outside the grammar
//! is an error carrying the raw text; nothing is repaired.

use serde_json::Value;

use super::{RefineAction, SegmentedAbstract, Stage};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseFault {
    #[error("{0} missing")]
    Missing(String),
    #[error("{0} duplicated")]
    Duplicated(String),
    #[error("{0} misnested")]
    Misnested(String),
    #[error("{0} is empty")]
    Empty(String),
    #[error("unexpected text `{0}`")]
    Unexpected(String),
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("{0}")]
    Shape(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{stage} output rejected: {fault}")]
pub struct StageParseError {
    pub stage: Stage,
    pub fault: ParseFault,
    pub raw: String,
}

fn snippet(s: &str) -> String {
    s.chars().take(40).collect()
}

/// Bodies of `tags`, which must appear exactly once each, in order, unnested,
/// separated only by whitespace.
fn tagged_bodies<'a>(raw: &'a str, stage: Stage, tags: &[&str]) -> Result<Vec<&'a str>, StageParseError> {
    let fail = |fault| StageParseError {
        stage,
        fault,
        raw: raw.to_string(),
    };
    for tag in tags {
        let open = raw.matches(&format!("<{tag}>")).count();
        let close = raw.matches(&format!("</{tag}>")).count();
        match (open, close) {
            (0, 0) => return Err(fail(ParseFault::Missing(tag.to_string()))),
            (1, 1) => {}
            (o, c) if o > 1 || c > 1 => return Err(fail(ParseFault::Duplicated(tag.to_string()))),
            _ => return Err(fail(ParseFault::Misnested(tag.to_string()))),
        }
    }

    let mut rest = raw;
    let mut bodies = Vec::with_capacity(tags.len());
    for tag in tags {
        rest = rest.trim_start();
        let open = format!("<{tag}>");
        let Some(after) = rest.strip_prefix(&open) else {
            return Err(if tags.iter().any(|t| rest.starts_with(&format!("<{t}>"))) {
                fail(ParseFault::Misnested(tag.to_string()))
            } else {
                fail(ParseFault::Unexpected(snippet(rest)))
            });
        };
        let close = format!("</{tag}>");
        let end = after
            .find(&close)
            .ok_or_else(|| fail(ParseFault::Misnested(tag.to_string())))?;
        let body = &after[..end];
        if tags
            .iter()
            .any(|t| body.contains(&format!("<{t}>")) || body.contains(&format!("</{t}>")))
        {
            return Err(fail(ParseFault::Misnested(tag.to_string())));
        }
        bodies.push(body.trim());
        rest = &after[end + close.len()..];
    }
    if !rest.trim().is_empty() {
        return Err(fail(ParseFault::Unexpected(snippet(rest.trim()))));
    }
    Ok(bodies)
}

pub fn parse_segments(raw: &str, work_id: &str) -> Result<SegmentedAbstract, StageParseError> {
    let tags = ["related_research", "research_methods", "conclusions"];
    let bodies = tagged_bodies(raw, Stage::Segmentation, &tags)?;
    if let Some(i) = bodies.iter().position(|b| b.is_empty()) {
        return Err(StageParseError {
            stage: Stage::Segmentation,
            fault: ParseFault::Empty(tags[i].to_string()),
            raw: raw.to_string(),
        });
    }
    Ok(SegmentedAbstract {
        work_id: work_id.to_string(),
        related_research: bodies[0].to_string(),
        research_methods: bodies[1].to_string(),
        conclusions: bodies[2].to_string(),
    })
}

fn json_rows(raw: &str, body: &str, stage: Stage) -> Result<Vec<Vec<String>>, StageParseError> {
    let fail = |fault| StageParseError {
        stage,
        fault,
        raw: raw.to_string(),
    };
    let v: Value = serde_json::from_str(body).map_err(|e| fail(ParseFault::Json(e.to_string())))?;
    let rows = v
        .as_array()
        .ok_or_else(|| fail(ParseFault::Shape("expected a JSON array".into())))?;
    rows.iter()
        .map(|row| {
            row.as_array()
                .and_then(|cells| cells.iter().map(|c| c.as_str().map(str::to_string)).collect())
                .ok_or_else(|| fail(ParseFault::Shape(format!("row {row} is not an array of strings"))))
        })
        .collect()
}

/// `<concept_pairs>[["Domain", "Concept"], ...]</concept_pairs>`
pub fn parse_concept_pairs(raw: &str) -> Result<Vec<(String, String)>, StageParseError> {
    let body = tagged_bodies(raw, Stage::Pairs, &["concept_pairs"])?[0];
    json_rows(raw, body, Stage::Pairs)?
        .into_iter()
        .map(|row| match <[String; 2]>::try_from(row) {
            Ok([d, c]) if !d.trim().is_empty() && !c.trim().is_empty() => Ok((d, c)),
            Ok(_) => Err(ParseFault::Shape("empty concept name".into())),
            Err(row) => Err(ParseFault::Shape(format!("pair has {} elements", row.len()))),
        })
        .collect::<Result<_, _>>()
        .map_err(|fault| StageParseError {
            stage: Stage::Pairs,
            fault,
            raw: raw.to_string(),
        })
}

/// `<concept_relations>[["Parent", "is-a", "Child"], ...]</concept_relations>`,
/// returned as (parent, child).
pub fn parse_relations(raw: &str, stage: Stage) -> Result<Vec<(String, String)>, StageParseError> {
    let body = tagged_bodies(raw, stage, &["concept_relations"])?[0];
    json_rows(raw, body, stage)?
        .into_iter()
        .map(|row| match <[String; 3]>::try_from(row) {
            Ok([p, rel, c]) if rel == "is-a" && !p.trim().is_empty() && !c.trim().is_empty() => Ok((p, c)),
            Ok([_, rel, _]) if rel != "is-a" => Err(ParseFault::Shape(format!("relation `{rel}` is not is-a"))),
            Ok(_) => Err(ParseFault::Shape("empty concept name".into())),
            Err(row) => Err(ParseFault::Shape(format!("triplet has {} elements", row.len()))),
        })
        .collect::<Result<_, _>>()
        .map_err(|fault| StageParseError {
            stage,
            fault,
            raw: raw.to_string(),
        })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub concept: String,
    pub action: RefineAction,
}

/// `[Concept, "add"|"delete"|"keep"]`, or `[]` / `null` for no proposal.
pub fn parse_refinement(raw: &str) -> Result<Option<Proposal>, StageParseError> {
    let fail = |fault| StageParseError {
        stage: Stage::Refinement,
        fault,
        raw: raw.to_string(),
    };
    let v: Value = serde_json::from_str(raw.trim()).map_err(|e| fail(ParseFault::Json(e.to_string())))?;
    let cells = match &v {
        Value::Null => return Ok(None),
        Value::Array(a) if a.is_empty() => return Ok(None),
        Value::Array(a) if a.len() == 2 => a,
        _ => return Err(fail(ParseFault::Shape("expected [concept, action]".into()))),
    };
    let (Some(concept), Some(action)) = (cells[0].as_str(), cells[1].as_str()) else {
        return Err(fail(ParseFault::Shape("expected two strings".into())));
    };
    if concept.trim().is_empty() {
        return Err(fail(ParseFault::Shape("empty concept name".into())));
    }
    let action = match action {
        "add" => RefineAction::Add,
        "delete" => RefineAction::Delete,
        "keep" => RefineAction::Keep,
        other => return Err(fail(ParseFault::UnknownAction(other.to_string()))),
    };
    Ok(Some(Proposal {
        concept: concept.to_string(),
        action,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "<related_research>Prior work.</related_research>\n<research_methods>We measure.</research_methods><conclusions>It works.</conclusions>";

    #[test]
    fn three_segments() {
        let s = parse_segments(GOOD, "W1").unwrap();
        assert_eq!(s.related_research, "Prior work.");
        assert_eq!(s.research_methods, "We measure.");
        assert_eq!(s.conclusions, "It works.");
        assert_eq!(parse_segments(&s.tagged(), "W1").unwrap(), s);
    }

    #[test]
    fn missing_conclusions() {
        let raw = "<related_research>a</related_research><research_methods>b</research_methods>";
        let e = parse_segments(raw, "W1").unwrap_err();
        assert_eq!(e.fault, ParseFault::Missing("conclusions".into()));
        assert_eq!(e.raw, raw);
    }

    #[test]
    fn duplicated_and_misnested() {
        let dup = format!("{GOOD}<conclusions>again</conclusions>");
        assert_eq!(
            parse_segments(&dup, "W").unwrap_err().fault,
            ParseFault::Duplicated("conclusions".into())
        );
        let nested =
            "<related_research>a<research_methods>b</research_methods></related_research><conclusions>c</conclusions>";
        assert!(matches!(
            parse_segments(nested, "W").unwrap_err().fault,
            ParseFault::Misnested(_)
        ));
        let swapped =
            "<research_methods>b</research_methods><related_research>a</related_research><conclusions>c</conclusions>";
        assert!(matches!(
            parse_segments(swapped, "W").unwrap_err().fault,
            ParseFault::Misnested(_)
        ));
    }

    #[test]
    fn stray_text_rejected() {
        let raw = format!("Sure! {GOOD}");
        assert!(matches!(
            parse_segments(&raw, "W").unwrap_err().fault,
            ParseFault::Unexpected(_)
        ));
        assert!(parse_segments(&format!("{GOOD} thanks"), "W").is_err());
    }

    #[test]
    fn empty_segment_rejected() {
        let raw =
            "<related_research> </related_research><research_methods>b</research_methods><conclusions>c</conclusions>";
        assert_eq!(
            parse_segments(raw, "W").unwrap_err().fault,
            ParseFault::Empty("related_research".into())
        );
    }

    #[test]
    fn pairs() {
        let p = parse_concept_pairs(r#"<concept_pairs>[["Physics","Neutrino oscillation"]]</concept_pairs>"#).unwrap();
        assert_eq!(p, vec![("Physics".to_string(), "Neutrino oscillation".to_string())]);
        assert!(parse_concept_pairs("<concept_pairs>[]</concept_pairs>")
            .unwrap()
            .is_empty());
        assert!(parse_concept_pairs(r#"<concept_pairs>[["a"]]</concept_pairs>"#).is_err());
        assert!(parse_concept_pairs(r#"<concept_pairs>[["a", 1]]</concept_pairs>"#).is_err());
        assert!(parse_concept_pairs(r#"<concept_pairs>[["a","b"]</concept_pairs>"#).is_err());
        assert!(parse_concept_pairs(r#"[["a","b"]]"#).is_err());
    }

    #[test]
    fn relations() {
        let r = parse_relations(
            r#"<concept_relations>[["Physics","is-a","Optics"]]</concept_relations>"#,
            Stage::Relations,
        )
        .unwrap();
        assert_eq!(r, vec![("Physics".to_string(), "Optics".to_string())]);
        assert!(parse_relations(
            r#"<concept_relations>[["a","part-of","b"]]</concept_relations>"#,
            Stage::Relations
        )
        .is_err());
    }

    #[test]
    fn refinement_decisions() {
        assert_eq!(parse_refinement("[]").unwrap(), None);
        assert_eq!(parse_refinement("null").unwrap(), None);
        assert_eq!(
            parse_refinement(r#"["Optics","add"]"#).unwrap(),
            Some(Proposal {
                concept: "Optics".into(),
                action: RefineAction::Add
            })
        );
        assert_eq!(
            parse_refinement(r#"["Optics","merge"]"#).unwrap_err().fault,
            ParseFault::UnknownAction("merge".into())
        );
        assert!(parse_refinement(r#"["Optics"]"#).is_err());
    }
}
