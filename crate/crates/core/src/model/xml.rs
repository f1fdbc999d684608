//! Schema-template XML, the payload of REGISTER and UPDATE requests.
//!
//! ```xml
//! <schema domain="SHOP">
//!   <parent>STORE</parent>
//!   <attribute name="location" kind="text"/>
//!   <attribute name="isOpen" kind="boolean" event="true"/>
//! </schema>
//! ```

use thiserror::Error;

use super::{AttributeDef, LocalSchema, ValueKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("unexpected element <{0}>")]
    UnknownElement(String),
    #[error("unexpected attribute {attr:?} on <{element}>")]
    UnknownAttribute { element: String, attr: String },
    #[error("missing attribute {attr:?} on <{element}>")]
    MissingAttribute { element: String, attr: String },
    #[error("bad value {value:?} for {attr:?}")]
    BadValue { attr: String, value: String },
    #[error("<parent> given more than once")]
    DuplicateParent,
}

fn flag(node: roxmltree::Node<'_, '_>, attr: &str) -> Result<bool, TemplateError> {
    match node.attribute(attr) {
        None | Some("false") => Ok(false),
        Some("true") => Ok(true),
        Some(other) => Err(TemplateError::BadValue {
            attr: attr.into(),
            value: other.into(),
        }),
    }
}

fn check_attrs(node: roxmltree::Node<'_, '_>, allowed: &[&str]) -> Result<(), TemplateError> {
    for a in node.attributes() {
        if !allowed.contains(&a.name()) || a.namespace().is_some() {
            return Err(TemplateError::UnknownAttribute {
                element: node.tag_name().name().into(),
                attr: a.name().into(),
            });
        }
    }
    Ok(())
}

fn required<'a>(node: roxmltree::Node<'a, '_>, attr: &str) -> Result<&'a str, TemplateError> {
    node.attribute(attr)
        .ok_or_else(|| TemplateError::MissingAttribute {
            element: node.tag_name().name().into(),
            attr: attr.into(),
        })
}

/// Parses a template. Structural validity only; call
/// [`validate_schema`](super::validate_schema) for the schema invariants.
pub fn parse_template(text: &str) -> Result<LocalSchema, TemplateError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| TemplateError::Xml(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "schema" || root.tag_name().namespace().is_some() {
        return Err(TemplateError::UnknownElement(root.tag_name().name().into()));
    }
    check_attrs(root, &["domain"])?;
    let mut schema = LocalSchema::new(required(root, "domain")?, Vec::new());

    for child in root.children() {
        if child.is_text() {
            if child.text().is_some_and(|t| !t.trim().is_empty()) {
                return Err(TemplateError::Xml("stray text inside <schema>".into()));
            }
            continue;
        }
        if !child.is_element() {
            continue;
        }
        match child.tag_name().name() {
            "parent" => {
                check_attrs(child, &[])?;
                if schema.parent_domain.is_some() {
                    return Err(TemplateError::DuplicateParent);
                }
                if child.children().any(|c| c.is_element()) {
                    return Err(TemplateError::Xml("<parent> must hold text only".into()));
                }
                schema.parent_domain = Some(child.text().unwrap_or("").trim().to_string());
            }
            "attribute" => {
                check_attrs(child, &["name", "kind", "event", "private"])?;
                if child.children().any(|c| c.is_element()) {
                    return Err(TemplateError::Xml("<attribute> must be empty".into()));
                }
                let kind_text = required(child, "kind")?;
                let kind = ValueKind::parse(kind_text).ok_or_else(|| TemplateError::BadValue {
                    attr: "kind".into(),
                    value: kind_text.into(),
                })?;
                schema.attributes.push(AttributeDef {
                    name: required(child, "name")?.to_string(),
                    kind,
                    is_event: flag(child, "event")?,
                    is_private: flag(child, "private")?,
                });
            }
            other => return Err(TemplateError::UnknownElement(other.into())),
        }
    }
    Ok(schema)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render_template(schema: &LocalSchema) -> String {
    let mut out = format!("<schema domain=\"{}\">\n", escape(&schema.domain_name));
    if let Some(parent) = &schema.parent_domain {
        out.push_str(&format!("  <parent>{}</parent>\n", escape(parent)));
    }
    for a in &schema.attributes {
        out.push_str(&format!(
            "  <attribute name=\"{}\" kind=\"{}\"",
            escape(&a.name),
            a.kind
        ));
        if a.is_event {
            out.push_str(" event=\"true\"");
        }
        if a.is_private {
            out.push_str(" private=\"true\"");
        }
        out.push_str("/>\n");
    }
    out.push_str("</schema>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHOP: &str = r#"
  <schema domain="SHOP">
    <parent>STORE</parent>            <!-- optional -->
    <attribute name="location" kind="text"/>
    <attribute name="crowdLevel" kind="number"/>
    <attribute name="isOpen" kind="boolean" event="true"/>
    <attribute name="revenue" kind="number" private="true"/>
  </schema>"#;

    #[test]
    fn parses_shop_template_in_order() {
        let s = parse_template(SHOP).unwrap();
        assert_eq!(s.domain_name, "SHOP");
        assert_eq!(s.parent_domain.as_deref(), Some("STORE"));
        let names: Vec<_> = s.attributes.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["location", "crowdLevel", "isOpen", "revenue"]);
        assert!(s.attributes[2].is_event);
        assert!(s.attributes[3].is_private);
        assert_eq!(s.attributes[1].kind, ValueKind::Number);
    }

    #[test]
    fn render_round_trips() {
        let s = parse_template(SHOP).unwrap();
        assert_eq!(parse_template(&render_template(&s)).unwrap(), s);
    }

    #[test]
    fn rejects_unknown_element_and_attribute() {
        let bad = r#"<schema domain="X"><sensor name="a"/></schema>"#;
        assert_eq!(
            parse_template(bad),
            Err(TemplateError::UnknownElement("sensor".into()))
        );
        let bad = r#"<schema domain="X"><attribute name="a" kind="text" unit="C"/></schema>"#;
        assert!(matches!(
            parse_template(bad),
            Err(TemplateError::UnknownAttribute { .. })
        ));
        let bad = r#"<schema domain="X"><attribute name="a" kind="float"/></schema>"#;
        assert!(matches!(parse_template(bad), Err(TemplateError::BadValue { .. })));
        assert!(matches!(parse_template("<schema"), Err(TemplateError::Xml(_))));
    }
}
