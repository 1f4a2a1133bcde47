//! The 10-feature structural histogram used as the niching distance space.

use serde::{Deserialize, Serialize};

use super::{entry_indices, exit_indices, GeneId, GenePool, GenomeError};

/// Structural feature histogram of a model. Duplicate block references
/// contribute once per reference position, matching how the model compiles.
///
/// Layer-to-layer connections are typed by endpoint kinds. Intra-block
/// edges count directly; each inter-block edge contributes one typed
/// connection from every exit layer of the source block to every entry
/// layer of the target block. `n_layer_conns_total` is the sum of the four
/// typed counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Spectrum {
    pub n_blocks: u32,
    pub n_layers_total: u32,
    pub n_block_conns: u32,
    pub n_layer_conns_total: u32,
    pub n_dense_layers: u32,
    pub n_conv_layers: u32,
    pub n_dense_dense: u32,
    pub n_dense_conv: u32,
    pub n_conv_dense: u32,
    pub n_conv_conv: u32,
}

impl Spectrum {
    pub fn as_array(&self) -> [u32; 10] {
        [
            self.n_blocks,
            self.n_layers_total,
            self.n_block_conns,
            self.n_layer_conns_total,
            self.n_dense_layers,
            self.n_conv_layers,
            self.n_dense_dense,
            self.n_dense_conv,
            self.n_conv_dense,
            self.n_conv_conv,
        ]
    }

    pub fn from_array(v: [u32; 10]) -> Self {
        Spectrum {
            n_blocks: v[0],
            n_layers_total: v[1],
            n_block_conns: v[2],
            n_layer_conns_total: v[3],
            n_dense_layers: v[4],
            n_conv_layers: v[5],
            n_dense_dense: v[6],
            n_dense_conv: v[7],
            n_conv_dense: v[8],
            n_conv_conv: v[9],
        }
    }
}

/// Computes the spectrum of a model. Pure: equal genomes yield equal
/// spectra. Errors on dangling references.
pub fn spectrum(pool: &GenePool, model_id: GeneId) -> Result<Spectrum, GenomeError> {
    let model = pool.model(model_id)?;
    let mut s = Spectrum {
        n_blocks: model.block_refs.len() as u32,
        n_block_conns: model.block_edges.len() as u32,
        ..Spectrum::default()
    };

    let mut add_typed = |from_conv: bool, to_conv: bool| match (from_conv, to_conv) {
        (false, false) => s.n_dense_dense += 1,
        (false, true) => s.n_dense_conv += 1,
        (true, false) => s.n_conv_dense += 1,
        (true, true) => s.n_conv_conv += 1,
    };

    // kinds of every layer position, per block reference position
    let mut kinds_per_pos: Vec<Vec<bool>> = Vec::with_capacity(model.block_refs.len());
    for &block_id in &model.block_refs {
        let block = pool.block(block_id).map_err(|_| GenomeError::DanglingBlock {
            model: model_id,
            block: block_id,
        })?;
        let mut kinds = Vec::with_capacity(block.layer_refs.len());
        for &layer_id in &block.layer_refs {
            let layer = pool.layer(layer_id).map_err(|_| GenomeError::DanglingLayer {
                block: block_id,
                layer: layer_id,
            })?;
            kinds.push(layer.kind.is_conv());
        }
        for &is_conv in &kinds {
            if is_conv {
                s.n_conv_layers += 1;
            } else {
                s.n_dense_layers += 1;
            }
        }
        for &(from, to) in &block.layer_edges {
            add_typed(kinds[from], kinds[to]);
        }
        kinds_per_pos.push(kinds);
    }
    s.n_layers_total = s.n_dense_layers + s.n_conv_layers;

    // boundary rule: every exit layer of the source block connects to every
    // entry layer of the target block
    for &(from_pos, to_pos) in &model.block_edges {
        let from_block = pool.block(model.block_refs[from_pos])?;
        let to_block = pool.block(model.block_refs[to_pos])?;
        let exits = exit_indices(from_block.layer_refs.len(), &from_block.layer_edges);
        let entries = entry_indices(to_block.layer_refs.len(), &to_block.layer_edges);
        for &e in &exits {
            for &n in &entries {
                add_typed(kinds_per_pos[from_pos][e], kinds_per_pos[to_pos][n]);
            }
        }
    }
    s.n_layer_conns_total = s.n_dense_dense + s.n_dense_conv + s.n_conv_dense + s.n_conv_conv;
    Ok(s)
}
