//! Analytic parameter, FLOP and activation-memory accounting.
//!
//! FLOPs count a multiply-accumulate as two operations. Normalization and
//! activation layers contribute a fixed per-element cost so the totals stay
//! exact integers that depend only on the plan and patch size.

use super::plan::{LayerKind, NetworkPlan};
use crate::error::Result;

/// mean (1) + centered square and sum (3) + standardize (2) + gain/shift (2).
pub const NORM_FLOPS_PER_ELEMENT: u64 = 8;
pub const ACT_FLOPS_PER_ELEMENT: u64 = 1;
pub const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapacityReport {
    pub params: u64,
    pub flops_per_patch: u64,
    pub peak_activation_bytes: u64,
}

impl CapacityReport {
    pub fn gflops(&self) -> f64 {
        self.flops_per_patch as f64 / 1e9
    }
}

/// Capacity of `plan` on its own patch size.
pub fn capacity(plan: &NetworkPlan) -> Result<CapacityReport> {
    capacity_for_patch(plan, plan.patch_size)
}

pub fn capacity_for_patch(plan: &NetworkPlan, patch: [usize; 3]) -> Result<CapacityReport> {
    plan.validate()?;
    plan.check_spatial(patch)?;
    let topo = plan.topology();
    let params = topo.param_count() as u64;

    let vox = |level: usize| -> u64 { patch.iter().map(|&s| (s >> level) as u64).product() };
    let mut flops = 0u64;
    let mut peak = 0u64;
    // Live elements of the skip tensors held while the current op runs.
    let mut held = 0u64;
    let note = |live: u64, peak: &mut u64| *peak = (*peak).max(live);

    let block = |conv: usize, level: usize, held: u64, flops: &mut u64, peak: &mut u64| {
        let LayerKind::Conv(spec) = topo.layers[conv].kind else {
            unreachable!("block index points at a convolution")
        };
        let in_level = if spec.stride[0] == 2 {
            level - 1
        } else {
            level
        };
        let in_el = vox(in_level) * spec.in_channels as u64;
        let out_el = vox(level) * spec.out_channels as u64;
        let macs =
            vox(level) * (spec.in_channels * spec.out_channels * spec.kernel_volume()) as u64;
        *flops += 2 * macs + out_el;
        note(held + in_el + out_el, peak);
        *flops += NORM_FLOPS_PER_ELEMENT * out_el;
        note(held + 2 * out_el, peak);
        *flops += ACT_FLOPS_PER_ELEMENT * out_el;
    };

    let stages = plan.num_stages;
    let mut skip_sizes = Vec::new();
    for s in 0..stages {
        for &conv in &topo.encoder[s] {
            block(conv, s, held, &mut flops, &mut peak);
        }
        if s + 1 < stages {
            let size = vox(s) * topo.widths[s] as u64;
            skip_sizes.push(size);
            held += size;
        }
    }
    for s in (0..stages - 1).rev() {
        let LayerKind::TransposedConv(spec) = topo.layers[topo.up[s]].kind else {
            unreachable!("up index points at a transposed convolution")
        };
        let in_el = vox(s + 1) * spec.in_channels as u64;
        let out_el = vox(s) * spec.out_channels as u64;
        let macs =
            vox(s + 1) * (spec.in_channels * spec.out_channels * spec.kernel_volume()) as u64;
        flops += 2 * macs + out_el;
        note(held + in_el + out_el, &mut peak);
        // concat consumes the skip
        let cat = out_el + skip_sizes[s];
        note(held + out_el + cat, &mut peak);
        held -= skip_sizes[s];
        for &conv in &topo.decoder[s] {
            block(conv, s, held, &mut flops, &mut peak);
        }
    }
    let LayerKind::Conv(head) = topo.layers[topo.head].kind else {
        unreachable!("head is a convolution")
    };
    let in_el = vox(0) * head.in_channels as u64;
    let out_el = vox(0) * head.out_channels as u64;
    flops += 2 * vox(0) * (head.in_channels * head.out_channels) as u64 + out_el;
    note(in_el + out_el, &mut peak);

    Ok(CapacityReport {
        params,
        flops_per_patch: flops,
        peak_activation_bytes: peak * BYTES_PER_ELEMENT,
    })
}
