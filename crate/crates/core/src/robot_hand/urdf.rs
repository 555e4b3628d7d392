//! Minimal URDF reader: links and revolute/prismatic/fixed joints, with
//! mimic couplings. Geometry, inertia and transmissions are ignored.

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Debug, Clone)]
pub(crate) struct RawJoint {
    pub name: String,
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    pub xyz: Vector3<f64>,
    pub rpy: Vector3<f64>,
    pub axis: Vector3<f64>,
    pub limits: Option<(f64, f64)>,
    pub mimic: Option<RawMimic>,
}

#[derive(Debug, Clone)]
pub(crate) struct RawMimic {
    pub joint: String,
    pub multiplier: f64,
    pub offset: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct RawRobot {
    pub name: String,
    pub links: Vec<String>,
    pub joints: Vec<RawJoint>,
}

fn parse_vec3(text: Option<&str>, default: Vector3<f64>, what: &str) -> Result<Vector3<f64>> {
    let Some(text) = text else {
        return Ok(default);
    };
    let parts: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Urdf(format!("bad {what} `{text}`: {e}")))?;
    if parts.len() != 3 || !parts.iter().all(|v| v.is_finite()) {
        return Err(Error::Urdf(format!("{what} needs three finite numbers, got `{text}`")));
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

fn parse_f64(node: roxmltree::Node, attr: &str, joint: &str) -> Result<Option<f64>> {
    node.attribute(attr)
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Urdf(format!("joint `{joint}`: bad {attr} `{t}`: {e}")))
        })
        .transpose()
}

fn child<'a, 'input>(node: roxmltree::Node<'a, 'input>, tag: &str) -> Option<roxmltree::Node<'a, 'input>> {
    node.children().find(|c| c.has_tag_name(tag))
}

pub(crate) fn parse(document: &str) -> Result<RawRobot> {
    let doc = roxmltree::Document::parse(document).map_err(|e| Error::Urdf(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("robot") {
        return Err(Error::Urdf(format!(
            "root element is <{}>, expected <robot>",
            root.tag_name().name()
        )));
    }
    let name = root.attribute("name").unwrap_or("").to_string();

    let mut links = Vec::new();
    let mut joints = Vec::new();
    for node in root.children().filter(|n| n.is_element()) {
        match node.tag_name().name() {
            "link" => {
                let link = node
                    .attribute("name")
                    .ok_or_else(|| Error::Urdf("<link> without a name".into()))?;
                if links.iter().any(|l| l == link) {
                    return Err(Error::Urdf(format!("duplicate link `{link}`")));
                }
                links.push(link.to_string());
            }
            "joint" => joints.push(parse_joint(node)?),
            _ => {}
        }
    }
    Ok(RawRobot { name, links, joints })
}

fn parse_joint(node: roxmltree::Node) -> Result<RawJoint> {
    let name = node
        .attribute("name")
        .ok_or_else(|| Error::Urdf("<joint> without a name".into()))?
        .to_string();
    let kind_str = node
        .attribute("type")
        .ok_or_else(|| Error::Urdf(format!("joint `{name}` has no type")))?;
    let kind = match kind_str {
        "revolute" => JointKind::Revolute,
        "prismatic" => JointKind::Prismatic,
        "fixed" => JointKind::Fixed,
        "continuous" | "floating" | "planar" => {
            return Err(Error::UnsupportedJoint {
                joint: name,
                kind: kind_str.to_string(),
            })
        }
        other => return Err(Error::Urdf(format!("joint `{name}` has unknown type `{other}`"))),
    };
    let link_ref = |tag: &str| -> Result<String> {
        child(node, tag)
            .and_then(|n| n.attribute("link"))
            .map(str::to_string)
            .ok_or_else(|| Error::Urdf(format!("joint `{name}` is missing <{tag} link=...>")))
    };
    let parent = link_ref("parent")?;
    let child_link = link_ref("child")?;

    let origin = child(node, "origin");
    let xyz = parse_vec3(origin.and_then(|o| o.attribute("xyz")), Vector3::zeros(), "origin xyz")?;
    let rpy = parse_vec3(origin.and_then(|o| o.attribute("rpy")), Vector3::zeros(), "origin rpy")?;
    let axis = parse_vec3(
        child(node, "axis").and_then(|a| a.attribute("xyz")),
        Vector3::x(),
        "axis",
    )?;

    let limits = match (kind, child(node, "limit")) {
        (JointKind::Fixed, _) => None,
        (_, None) => return Err(Error::Urdf(format!("movable joint `{name}` has no <limit>"))),
        (_, Some(limit)) => {
            let lower = parse_f64(limit, "lower", &name)?.unwrap_or(0.0);
            let upper = parse_f64(limit, "upper", &name)?.unwrap_or(0.0);
            if !(lower.is_finite() && upper.is_finite()) || lower > upper {
                return Err(Error::Urdf(format!(
                    "joint `{name}` has invalid limits [{lower}, {upper}]"
                )));
            }
            Some((lower, upper))
        }
    };

    let mimic = match child(node, "mimic") {
        None => None,
        Some(m) => Some(RawMimic {
            joint: m
                .attribute("joint")
                .ok_or_else(|| Error::Urdf(format!("joint `{name}`: <mimic> without a joint")))?
                .to_string(),
            multiplier: parse_f64(m, "multiplier", &name)?.unwrap_or(1.0),
            offset: parse_f64(m, "offset", &name)?.unwrap_or(0.0),
        }),
    };

    Ok(RawJoint {
        name,
        kind,
        parent,
        child: child_link,
        xyz,
        rpy,
        axis,
        limits,
        mimic,
    })
}
