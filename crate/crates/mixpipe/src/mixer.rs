//! Mixing of visual embeddings: channel-wise concatenation of aligned
//! patch-level token groups, projection into the language dimension, and
//! sequence-wise concatenation with the query tokens (query tokens first).

use crate::checkpoint::ParamStore;
use crate::encoders::{GroupRef, Provenance, TokenGroup};
use crate::error::{Error, Result};
use crate::numerics::Graph;
use crate::params::{insert_const, insert_normal, BoundParams};

pub const PATCH_PROJ_W: &str = "mix.patch_proj.w";
pub const PATCH_PROJ_B: &str = "mix.patch_proj.b";
pub const QUERY_PROJ_W: &str = "mix.query_proj.w";
pub const QUERY_PROJ_B: &str = "mix.query_proj.b";

/// Shape contract of the mixing stage: which encoders feed the channel
/// concat, which feeds the query path, and the two projections into the
/// language dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MixLayout {
    pub patch_sources: Vec<String>,
    pub query_source: String,
    /// Sum of the patch sources' dims, in `patch_sources` order.
    pub patch_in_dim: usize,
    pub query_in_dim: usize,
    pub lm_dim: usize,
}

impl MixLayout {
    pub fn validate(&self) -> Result<()> {
        if self.patch_sources.is_empty() {
            return Err(Error::InvalidConfig("mix layout needs at least one patch source".into()));
        }
        if self.patch_in_dim == 0 || self.query_in_dim == 0 || self.lm_dim == 0 {
            return Err(Error::InvalidConfig("mix layout dims must be positive".into()));
        }
        Ok(())
    }
}

/// Allocates the two projection layers (weights normal(0, 0.02), bias zero).
pub fn init_params(store: &mut ParamStore, layout: &MixLayout, seed: u64) -> Result<()> {
    layout.validate()?;
    insert_normal(store, PATCH_PROJ_W, vec![layout.patch_in_dim, layout.lm_dim], 0.02, seed);
    insert_const(store, PATCH_PROJ_B, vec![layout.lm_dim], 0.0);
    insert_normal(store, QUERY_PROJ_W, vec![layout.query_in_dim, layout.lm_dim], 0.02, seed);
    insert_const(store, QUERY_PROJ_B, vec![layout.lm_dim], 0.0);
    Ok(())
}

/// Channel-wise concatenation: token count is preserved, embedding dims are
/// summed, and per-position order follows the group order given.
pub fn channel_concat(g: &mut Graph, groups: &[GroupRef]) -> Result<GroupRef> {
    if groups.is_empty() {
        return Err(Error::InvalidInput("channel_concat of zero groups".into()));
    }
    let first = &groups[0];
    for group in &groups[1..] {
        if group.count != first.count {
            return Err(Error::InvalidInput(format!(
                "channel_concat token count mismatch: {} ({}) vs {} ({})",
                first.provenance.encoder_id, first.count, group.provenance.encoder_id, group.count
            )));
        }
        if group.provenance.scale_tag != first.provenance.scale_tag
            || group.provenance.crop_index != first.provenance.crop_index
        {
            return Err(Error::InvalidInput(format!(
                "channel_concat provenance mismatch: {} vs {}",
                first.provenance.render(),
                group.provenance.render()
            )));
        }
    }
    if groups.len() == 1 {
        return Ok(first.clone());
    }
    let ids: Vec<_> = groups.iter().map(|gr| gr.id).collect();
    let id = g.concat_cols(&ids)?;
    let encoder_id = groups
        .iter()
        .map(|gr| gr.provenance.encoder_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(GroupRef {
        id,
        count: first.count,
        dim: groups.iter().map(|gr| gr.dim).sum(),
        provenance: Provenance::new(&encoder_id, &first.provenance.scale_tag, first.provenance.crop_index),
    })
}

/// Affine projection of a token group into the language dimension.
pub fn project(
    g: &mut Graph,
    bp: &BoundParams,
    group: &GroupRef,
    w_key: &str,
    b_key: &str,
    lm_dim: usize,
) -> Result<GroupRef> {
    let w = bp.get(w_key)?;
    if g.shape(w)[0] != group.dim {
        return Err(Error::ShapeMismatch {
            op: "mix_project",
            lhs: vec![group.count, group.dim],
            rhs: g.shape(w).to_vec(),
        });
    }
    let id = g.linear(group.id, w, bp.get(b_key)?)?;
    Ok(GroupRef { id, count: group.count, dim: lm_dim, provenance: group.provenance.clone() })
}

/// Sequence-wise concatenation of projected query and patch tokens.
/// Query tokens come first; both inputs must already be at the language
/// dimension.
pub fn assemble_group(g: &mut Graph, patch: &GroupRef, query: &GroupRef) -> Result<GroupRef> {
    if patch.dim != query.dim {
        return Err(Error::ShapeMismatch {
            op: "assemble_group",
            lhs: vec![query.count, query.dim],
            rhs: vec![patch.count, patch.dim],
        });
    }
    let id = g.concat_rows(&[query.id, patch.id])?;
    let encoder_id = format!(
        "mix({}/{}+{}/{})",
        query.provenance.encoder_id, query.count, patch.provenance.encoder_id, patch.count
    );
    Ok(GroupRef {
        id,
        count: patch.count + query.count,
        dim: patch.dim,
        provenance: Provenance::new(&encoder_id, &patch.provenance.scale_tag, patch.provenance.crop_index),
    })
}

/// Plain-data channel concat used by tests and offline tools; same
/// semantics as the on-tape version.
pub fn channel_concat_plain(groups: &[TokenGroup]) -> Result<TokenGroup> {
    let mut g = Graph::new();
    let refs: Vec<GroupRef> = groups
        .iter()
        .map(|tg| {
            Ok(GroupRef {
                id: g.constant(vec![tg.count, tg.dim], tg.data.clone())?,
                count: tg.count,
                dim: tg.dim,
                provenance: tg.provenance.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let out = channel_concat(&mut g, &refs)?;
    Ok(out.to_plain(&g))
}

/// Plain-data sequence concat (query first), for tests and offline tools.
pub fn assemble_group_plain(patch: &TokenGroup, query: &TokenGroup) -> Result<TokenGroup> {
    let mut g = Graph::new();
    let p = GroupRef {
        id: g.constant(vec![patch.count, patch.dim], patch.data.clone())?,
        count: patch.count,
        dim: patch.dim,
        provenance: patch.provenance.clone(),
    };
    let q = GroupRef {
        id: g.constant(vec![query.count, query.dim], query.data.clone())?,
        count: query.count,
        dim: query.dim,
        provenance: query.provenance.clone(),
    };
    let out = assemble_group(&mut g, &p, &q)?;
    Ok(out.to_plain(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn group(name: &str, count: usize, dim: usize, seed: u64) -> TokenGroup {
        let mut rng = crate::rng::stream(seed, name);
        let data = (0..count * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TokenGroup::new(count, dim, data, Provenance::new(name, "global", 0)).unwrap()
    }

    #[test]
    fn channel_concat_sums_dims_and_keeps_count() {
        let a = group("a", 17, 16, 1);
        let b = group("b", 17, 24, 2);
        let out = channel_concat_plain(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(out.count, 17);
        assert_eq!(out.dim, 40);
        // per-position layout follows source order
        assert_eq!(&out.token(3)[..16], a.token(3));
        assert_eq!(&out.token(3)[16..], b.token(3));
        assert_eq!(out.provenance.encoder_id, "a+b");
    }

    #[test]
    fn single_group_concat_is_identity() {
        let a = group("a", 5, 8, 3);
        let out = channel_concat_plain(&[a.clone()]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn paper_scale_concat_keeps_257_tokens() {
        let a = group("clip", 257, 4, 4);
        let b = group("dino", 257, 6, 5);
        let out = channel_concat_plain(&[a, b]).unwrap();
        assert_eq!(out.count, 257);
        assert_eq!(out.dim, 10);
    }

    #[test]
    fn count_mismatch_cites_both_counts() {
        let a = group("a", 17, 16, 1);
        let b = group("b", 16, 16, 2);
        let err = channel_concat_plain(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("17") && err.contains("16"), "{err}");
    }

    #[test]
    fn assemble_places_query_tokens_first() {
        let patch = group("patch", 17, 32, 6);
        let query = group("query", 4, 32, 7);
        let out = assemble_group_plain(&patch, &query).unwrap();
        assert_eq!(out.count, 21);
        assert_eq!(out.token(0), query.token(0));
        assert_eq!(out.token(4), patch.token(0));
    }

    #[test]
    fn paper_scale_assembly_is_289_tokens() {
        let patch = group("patch", 257, 8, 8);
        let query = group("query", 32, 8, 9);
        assert_eq!(assemble_group_plain(&patch, &query).unwrap().count, 289);
    }

    #[test]
    fn assemble_rejects_dim_mismatch() {
        let patch = group("patch", 17, 32, 6);
        let query = group("query", 4, 16, 7);
        assert!(assemble_group_plain(&patch, &query).is_err());
    }

    #[test]
    fn provenance_rendering_is_deterministic() {
        let patch = group("a+b", 6, 8, 1);
        let query = group("qf", 2, 8, 2);
        let r1 = assemble_group_plain(&patch, &query).unwrap().provenance.render();
        let r2 = assemble_group_plain(&patch, &query).unwrap().provenance.render();
        assert_eq!(r1, r2);
        assert_eq!(r1, "mix(qf/2+a+b/6)@global:0");
    }

    #[test]
    fn projection_is_linear_with_zero_bias() {
        // superposition: f(x + y) == f(x) + f(y) when the bias is zero
        let layout = MixLayout {
            patch_sources: vec!["a".into()],
            query_source: "q".into(),
            patch_in_dim: 12,
            query_in_dim: 8,
            lm_dim: 10,
        };
        let mut store = ParamStore::new();
        init_params(&mut store, &layout, 42).unwrap();
        store.get_mut(PATCH_PROJ_B).unwrap().data.iter_mut().for_each(|v| *v = 0.0);

        let run = |data: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let bp = BoundParams::bind(&mut g, &store, |_| false).unwrap();
            let gr = GroupRef {
                id: g.constant(vec![3, 12], data.to_vec()).unwrap(),
                count: 3,
                dim: 12,
                provenance: Provenance::new("a", "global", 0),
            };
            let out = project(&mut g, &bp, &gr, PATCH_PROJ_W, PATCH_PROJ_B, 10).unwrap();
            g.value(out.id).to_vec()
        };

        let x = group("x", 3, 12, 10).data;
        let y = group("y", 3, 12, 11).data;
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let fx = run(&x);
        let fy = run(&y);
        let fsum = run(&sum);
        for i in 0..fx.len() {
            assert!((fsum[i] - fx[i] - fy[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_rejects_wrong_input_dim() {
        let layout = MixLayout {
            patch_sources: vec!["a".into()],
            query_source: "q".into(),
            patch_in_dim: 12,
            query_in_dim: 8,
            lm_dim: 10,
        };
        let mut store = ParamStore::new();
        init_params(&mut store, &layout, 42).unwrap();
        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &store, |_| false).unwrap();
        let gr = GroupRef {
            id: g.constant(vec![3, 9], vec![0.0; 27]).unwrap(),
            count: 3,
            dim: 9,
            provenance: Provenance::new("a", "global", 0),
        };
        assert!(project(&mut g, &bp, &gr, PATCH_PROJ_W, PATCH_PROJ_B, 10).is_err());
    }
}
