//! Landmark layouts and the clip-level landmark graph.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralRepresentation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub nodes: Vec<usize>,
}

/// Which landmark belongs to which facial region, plus the hub node that
/// links all regions together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkLayout {
    pub num_landmarks: usize,
    /// Coordinates per landmark (2 or 3); each is its own channel.
    pub coord_arity: usize,
    pub regions: Vec<Region>,
    pub hub: usize,
}

impl LandmarkLayout {
    /// The 68-point iBUG convention; the hub is the nasal root (index 27).
    pub fn ibug68(coord_arity: usize) -> Self {
        let region = |name: &str, r: core::ops::RangeInclusive<usize>| Region {
            name: name.into(),
            nodes: r.collect(),
        };
        LandmarkLayout {
            num_landmarks: 68,
            coord_arity,
            regions: vec![
                region("jaw", 0..=16),
                region("right_brow", 17..=21),
                region("left_brow", 22..=26),
                region("nose", 27..=35),
                region("right_eye", 36..=41),
                region("left_eye", 42..=47),
                region("mouth", 48..=67),
            ],
            hub: 27,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coord_arity == 0 {
            return Err(Error::Layout("coordinate arity must be positive".into()));
        }
        if self.hub >= self.num_landmarks {
            return Err(Error::Layout(format!(
                "hub {} outside {} landmarks",
                self.hub, self.num_landmarks
            )));
        }
        let mut seen = vec![false; self.num_landmarks];
        for r in &self.regions {
            for &n in &r.nodes {
                if n >= self.num_landmarks || seen[n] {
                    return Err(Error::Layout(format!(
                        "node {n} in region `{}` is invalid or repeated",
                        r.name
                    )));
                }
                seen[n] = true;
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.num_landmarks * self.coord_arity
    }

    /// Region name for each node (`"none"` for unassigned nodes).
    pub fn region_labels(&self) -> Vec<String> {
        let mut labels = vec![String::from("none"); self.num_landmarks];
        for r in &self.regions {
            for &n in &r.nodes {
                labels[n] = r.name.clone();
            }
        }
        labels
    }

    /// Symmetric adjacency, zero diagonal: complete subgraph per region and
    /// the hub joined to every node.
    pub fn adjacency(&self) -> Vec<bool> {
        let v = self.num_landmarks;
        let mut adj = vec![false; v * v];
        for r in &self.regions {
            for &a in &r.nodes {
                for &b in &r.nodes {
                    if a != b {
                        adj[a * v + b] = true;
                    }
                }
            }
        }
        for n in 0..v {
            if n != self.hub {
                adj[self.hub * v + n] = true;
                adj[n * v + self.hub] = true;
            }
        }
        adj
    }
}

/// One node per landmark; features are the amplitude rows of its coordinate
/// channels followed by their phase rows (`2 * coord_arity * k` values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkGraph {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub node_features: Vec<f64>,
    pub adjacency: Vec<bool>,
    pub region_labels: Vec<String>,
}

impl LandmarkGraph {
    pub fn degree(&self, n: usize) -> usize {
        self.adjacency[n * self.num_nodes..(n + 1) * self.num_nodes]
            .iter()
            .filter(|&&a| a)
            .count()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a).count() / 2
    }

    /// Directed `(source, target)` pairs, both directions for each edge.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        directed_edges(&self.adjacency, self.num_nodes)
    }

    pub fn features(&self, n: usize) -> &[f64] {
        &self.node_features[n * self.feature_dim..(n + 1) * self.feature_dim]
    }

    pub fn is_connected(&self) -> bool {
        let v = self.num_nodes;
        if v == 0 {
            return true;
        }
        let mut seen = vec![false; v];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(a) = stack.pop() {
            for b in 0..v {
                if self.adjacency[a * v + b] && !seen[b] {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn directed_edges(adjacency: &[bool], v: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..v {
        for b in 0..v {
            if adjacency[a * v + b] {
                edges.push((b, a));
            }
        }
    }
    edges
}

pub fn build_landmark_graph(rep: &SpectralRepresentation, layout: &LandmarkLayout) -> Result<LandmarkGraph> {
    layout.validate()?;
    let d = layout.coord_arity;
    if rep.channels % d != 0 {
        return Err(Error::Layout(format!(
            "{} channels are not divisible by coordinate arity {d}",
            rep.channels
        )));
    }
    if rep.channels / d != layout.num_landmarks {
        return Err(Error::Layout(format!(
            "{} channels give {} landmarks, layout has {}",
            rep.channels,
            rep.channels / d,
            layout.num_landmarks
        )));
    }
    let v = layout.num_landmarks;
    let k = rep.k;
    let feature_dim = 2 * d * k;
    let mut node_features = Vec::with_capacity(v * feature_dim);
    for n in 0..v {
        for c in 0..d {
            node_features.extend_from_slice(rep.amplitude_row(n * d + c));
        }
        for c in 0..d {
            node_features.extend_from_slice(rep.phase_row(n * d + c));
        }
    }
    Ok(LandmarkGraph {
        num_nodes: v,
        feature_dim,
        node_features,
        adjacency: layout.adjacency(),
        region_labels: layout.region_labels(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::AttributeKind;

    fn rep(channels: usize, k: usize) -> SpectralRepresentation {
        SpectralRepresentation {
            kind: AttributeKind::Landmarks,
            channels,
            k,
            amplitude: (0..channels * k).map(|i| i as f64).collect(),
            phase: (0..channels * k).map(|i| -(i as f64)).collect(),
        }
    }

    #[test]
    fn nasal_root_is_adjacent_to_every_node() {
        let g = build_landmark_graph(&rep(136, 4), &LandmarkLayout::ibug68(2)).unwrap();
        assert_eq!(g.degree(27), 67);
        assert!(g.is_connected());
    }

    #[test]
    fn right_eye_is_a_complete_subgraph() {
        let g = build_landmark_graph(&rep(136, 4), &LandmarkLayout::ibug68(2)).unwrap();
        let eye: Vec<usize> = (36..=41).collect();
        let within = eye
            .iter()
            .flat_map(|&a| eye.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| a < b && g.adjacency[a * 68 + b])
            .count();
        assert_eq!(within, 15);
    }

    #[test]
    fn adjacency_is_symmetric_without_self_loops() {
        let adj = LandmarkLayout::ibug68(3).adjacency();
        for a in 0..68 {
            assert!(!adj[a * 68 + a]);
            for b in 0..68 {
                assert_eq!(adj[a * 68 + b], adj[b * 68 + a]);
            }
        }
    }

    #[test]
    fn node_features_interleave_coordinates() {
        let k = 3;
        let r = rep(136, k);
        let g = build_landmark_graph(&r, &LandmarkLayout::ibug68(2)).unwrap();
        assert_eq!(g.feature_dim, 12);
        let f = g.features(5);
        assert_eq!(&f[..3], r.amplitude_row(10));
        assert_eq!(&f[3..6], r.amplitude_row(11));
        assert_eq!(&f[6..9], r.phase_row(10));
        assert_eq!(&f[9..], r.phase_row(11));
    }

    #[test]
    fn bad_channel_count_is_a_layout_error() {
        let err = build_landmark_graph(&rep(135, 2), &LandmarkLayout::ibug68(2)).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }
}
