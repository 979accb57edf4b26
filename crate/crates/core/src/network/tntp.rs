//! Reader for the TNTP text format used by the Transportation Networks
//! test-problem collection (`*_net.tntp` and `*_flow.tntp` files).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One link row of a TNTP network file, before linearization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTntpEdge {
    pub tail: u32,
    pub head: u32,
    pub capacity: f64,
    pub length: f64,
    pub free_flow_time: f64,
    pub bpr_coefficient: f64,
    pub bpr_power: f64,
    /// Volume from the companion flow file, when one was supplied and lists this link.
    pub recorded_flow: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TntpNetwork {
    pub node_count: usize,
    pub first_thru_node: usize,
    pub edges: Vec<RawTntpEdge>,
}

const NODES_TAG: &str = "<NUMBER OF NODES>";
const LINKS_TAG: &str = "<NUMBER OF LINKS>";
const THRU_TAG: &str = "<FIRST THRU NODE>";
const END_TAG: &str = "<END OF METADATA>";

/// Parses a TNTP network file and, optionally, its flow file.
///
/// Link rows keep file order and 1-based node ids. Lines starting with `~`
/// are comments. The trailing `;` of each row is optional.
pub fn load_tntp(net_text: &str, flow_text: Option<&str>) -> Result<TntpNetwork> {
    let mut lines = net_text.lines().enumerate();
    let mut metadata: HashMap<&'static str, usize> = HashMap::new();
    let mut saw_end = false;

    for (idx, raw) in lines.by_ref() {
        let line = raw.trim();
        if line.starts_with(END_TAG) {
            saw_end = true;
            break;
        }
        for tag in [NODES_TAG, LINKS_TAG, THRU_TAG] {
            if let Some(rest) = line.strip_prefix(tag) {
                let value = rest.trim().parse::<usize>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    message: format!("{tag} expects a non-negative integer, got {:?}", rest.trim()),
                })?;
                metadata.insert(tag, value);
            }
        }
    }
    if !saw_end {
        return Err(Error::MissingTag(END_TAG.to_string()));
    }
    let node_count = *metadata.get(NODES_TAG).ok_or_else(|| Error::MissingTag(NODES_TAG.to_string()))?;
    let link_count = *metadata.get(LINKS_TAG).ok_or_else(|| Error::MissingTag(LINKS_TAG.to_string()))?;
    let first_thru_node = *metadata.get(THRU_TAG).ok_or_else(|| Error::MissingTag(THRU_TAG.to_string()))?;

    let mut edges = Vec::with_capacity(link_count);
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('~') {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line
            .split_whitespace()
            .filter(|tok| *tok != ";")
            .map(|tok| tok.trim_end_matches(';'))
            .filter(|tok| !tok.is_empty())
            .collect();
        if fields.len() < 7 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected at least 7 columns, found {}", fields.len()),
            });
        }
        let num = |col: usize, name: &str| -> Result<f64> {
            fields[col].parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("column {name} is not numeric: {:?}", fields[col]),
            })
        };
        let node = |col: usize, name: &str| -> Result<u32> {
            let v = num(col, name)?;
            if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("column {name} is not a node id: {:?}", fields[col]),
                });
            }
            Ok(v as u32)
        };
        let edge = RawTntpEdge {
            tail: node(0, "init_node")?,
            head: node(1, "term_node")?,
            capacity: num(2, "capacity")?,
            length: num(3, "length")?,
            free_flow_time: num(4, "free_flow_time")?,
            bpr_coefficient: num(5, "b")?,
            bpr_power: num(6, "power")?,
            recorded_flow: None,
        };
        validate_edge(&edge, node_count, line_no)?;
        edges.push(edge);
    }

    if edges.len() != link_count {
        return Err(Error::Validation(format!(
            "header declares {link_count} links but {} rows were read",
            edges.len()
        )));
    }

    if let Some(flow) = flow_text {
        attach_flows(&mut edges, flow)?;
    }

    Ok(TntpNetwork { node_count, first_thru_node, edges })
}

fn validate_edge(edge: &RawTntpEdge, node_count: usize, line: usize) -> Result<()> {
    for id in [edge.tail, edge.head] {
        if id == 0 || id as usize > node_count {
            return Err(Error::Validation(format!("line {line}: node id {id} outside 1..={node_count}")));
        }
    }
    if !(edge.capacity > 0.0) {
        return Err(Error::Validation(format!("line {line}: capacity must be positive, got {}", edge.capacity)));
    }
    if !(edge.free_flow_time > 0.0) {
        return Err(Error::Validation(format!(
            "line {line}: free-flow time must be positive, got {}",
            edge.free_flow_time
        )));
    }
    if !(edge.bpr_power >= 1.0) {
        return Err(Error::Validation(format!("line {line}: BPR power must be >= 1, got {}", edge.bpr_power)));
    }
    if edge.bpr_coefficient < 0.0 {
        return Err(Error::Validation(format!(
            "line {line}: BPR coefficient must be non-negative, got {}",
            edge.bpr_coefficient
        )));
    }
    Ok(())
}

/// Flow files have a free-form header followed by `from to volume cost` rows.
fn attach_flows(edges: &mut [RawTntpEdge], flow_text: &str) -> Result<()> {
    let mut volumes: HashMap<(u32, u32), f64> = HashMap::new();
    for (idx, raw) in flow_text.lines().enumerate() {
        let fields: Vec<&str> =
            raw.split_whitespace().map(|tok| tok.trim_end_matches(';')).filter(|tok| !tok.is_empty()).collect();
        if fields.len() < 3 || fields[0].parse::<f64>().is_err() {
            continue;
        }
        let parse = |col: usize| -> Result<f64> {
            fields[col].parse::<f64>().map_err(|_| Error::Parse {
                line: idx + 1,
                message: format!("flow column {col} is not numeric: {:?}", fields[col]),
            })
        };
        let from = parse(0)? as u32;
        let to = parse(1)? as u32;
        volumes.insert((from, to), parse(2)?);
    }
    for edge in edges.iter_mut() {
        edge.recorded_flow = volumes.get(&(edge.tail, edge.head)).copied();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "<NUMBER OF ZONES> 1\n<NUMBER OF NODES> 4\n<FIRST THRU NODE> 1\n<NUMBER OF LINKS> 2\n<END OF METADATA>\n\n~ init term cap len fft b power speed toll type ;\n\t1\t2\t100\t1\t0.5\t0.15\t4\t0\t0\t1\t;\n\t3\t4\t200\t2\t1.0\t0.15\t4\t0\t0\t1\t;\n";

    #[test]
    fn parses_minimal_file() {
        let net = load_tntp(MINIMAL, None).unwrap();
        assert_eq!(net.node_count, 4);
        assert_eq!(net.edges.len(), 2);
        assert_eq!((net.edges[0].tail, net.edges[0].head), (1, 2));
        assert_eq!(net.edges[1].capacity, 200.0);
        assert_eq!(net.edges[1].free_flow_time, 1.0);
        assert!(net.edges[0].recorded_flow.is_none());
    }

    #[test]
    fn attaches_flow_file() {
        let flow = "From \tTo \tVolume \tCost\n1\t2\t42.5\t0.6\n";
        let net = load_tntp(MINIMAL, Some(flow)).unwrap();
        assert_eq!(net.edges[0].recorded_flow, Some(42.5));
        assert_eq!(net.edges[1].recorded_flow, None);
    }

    #[test]
    fn zero_capacity_is_rejected() {
        let text = MINIMAL.replace("\t1\t2\t100\t", "\t1\t2\t0\t");
        assert!(matches!(load_tntp(&text, None), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_header_tag_is_named() {
        let text = MINIMAL.replace("<NUMBER OF NODES> 4\n", "");
        match load_tntp(&text, None) {
            Err(Error::MissingTag(tag)) => assert_eq!(tag, NODES_TAG),
            other => panic!("unexpected {other:?}"),
        }
        let text = MINIMAL.replace("<END OF METADATA>\n", "");
        assert!(matches!(load_tntp(&text, None), Err(Error::MissingTag(_))));
    }

    #[test]
    fn non_numeric_field_reports_line() {
        let text = MINIMAL.replace("0.5\t0.15", "fast\t0.15");
        match load_tntp(&text, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn node_out_of_range_is_rejected() {
        let text = MINIMAL.replace("\t3\t4\t200", "\t3\t9\t200");
        assert!(matches!(load_tntp(&text, None), Err(Error::Validation(_))));
    }
}
