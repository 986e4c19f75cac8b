use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::phantom::neighbours26;
use crate::volume::{Dims, Volume};

/// 26-connected components of `mask`; returns per-voxel component ids
/// (`usize::MAX` outside the mask) and component sizes.
pub fn connected_components(mask: &[bool], dims: Dims) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours26(dims, i) {
                if mask[j] && comp[j] == usize::MAX {
                    comp[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Keeps the head and zeroes everything else.
///
/// The head is the largest 26-connected component of nonzero voxels; the
/// bed and any other separate object are set to zero. No intensity
/// threshold is involved: the bed is denser than soft tissue and the skull
/// is cut into plates by sutures, so a bright-voxel component can be the
/// bed rather than the head.
pub fn remove_bed(ct: &Volume) -> Result<Volume> {
    let support: Vec<bool> = ct.data().iter().map(|&v| v != 0.0).collect();
    let (comp, sizes) = connected_components(&support, ct.dims());
    let Some((head, _)) = sizes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) else {
        return Err(Error::EmptyForeground);
    };
    let data = ct.data().iter().zip(&comp).map(|(&v, &c)| if c == head { v } else { 0.0 }).collect();
    ct.with_data(data)
}
