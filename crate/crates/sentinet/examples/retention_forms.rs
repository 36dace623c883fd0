//! The temporal encoder's two equivalent faces: a parallel form that
//! processes a whole window at once (what training uses) and a recurrent
//! form that carries a small state from step to step (what streaming
//! inference uses). They are algebraically the same computation; this
//! example measures how closely they land in double precision, for plain
//! multi-scale retention and for the cross-modal variant.
//!
//! ```text
//! cargo run --example retention_forms
//! ```

use ndarray::{Array2, ArrayD, Axis, IxDyn, Slice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sentinet::cross::{
    cr_parallel, cr_parallel_batched, cr_recurrent_step, to_modality_axis, CrossRetentionParams,
    CrossState,
};
use sentinet::retention::{
    head_gammas, msr_parallel, msr_recurrent_step, RetentionHeadParams, RetentionState,
};

fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-0.5..0.5))
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (b, n, w, d_in, d, dh, heads) = (2, 4, 32, 6, 8, 4, 2);

    // ---- multi-scale retention ----
    let gammas = head_gammas(heads)?;
    println!("head decays: {gammas:?}");
    let head_params: Vec<RetentionHeadParams> = gammas
        .iter()
        .map(|&gamma| RetentionHeadParams {
            w_q: mat(&mut rng, d_in, d),
            w_k: mat(&mut rng, d_in, d),
            w_v: mat(&mut rng, d_in, dh),
            gamma,
        })
        .collect();
    let x = ArrayD::from_shape_fn(IxDyn(&[b, n, w, d_in]), |_| rng.gen_range(-1.0..1.0));

    let parallel = msr_parallel(&x, &head_params)?;

    let mut states: Vec<RetentionState> =
        (0..heads).map(|_| RetentionState::zeros(b, n, d, dh)).collect();
    let mut recurrent = Vec::with_capacity(w);
    for t in 0..w {
        let x_t = x.slice_axis(Axis(2), Slice::from(t..t + 1)).to_owned();
        recurrent.push(msr_recurrent_step(&x_t, &mut states, &head_params)?);
    }
    let views: Vec<_> = recurrent.iter().map(|o| o.view()).collect();
    let stacked = ndarray::concatenate(Axis(2), &views)?.into_dyn();
    println!(
        "MSR  parallel window vs {} stacked recurrent steps: max |Δ| = {:.3e}",
        w,
        max_abs_diff(&parallel, &stacked)
    );

    // ---- cross-modal retention ----
    let m = 3;
    let cr = CrossRetentionParams::new(
        (0..m).map(|_| mat(&mut rng, d_in, d)).collect(),
        (0..m).map(|_| mat(&mut rng, d_in, d)).collect(),
        (0..m).map(|_| mat(&mut rng, d_in, dh)).collect(),
    )?;
    let xm = ArrayD::from_shape_fn(IxDyn(&[b, n, w, m * d_in]), |_| rng.gen_range(-1.0..1.0));

    let loop_form = cr_parallel(&xm, &cr)?;
    let batched = cr_parallel_batched(&to_modality_axis(&xm, m)?, &cr)?;
    println!(
        "CR   per-modality loop vs batched (sum − self) keys:  max |Δ| = {:.3e}",
        max_abs_diff(&loop_form, &batched)
    );

    let mut state = CrossState::zeros(b, n, m, d, dh);
    let mut rec = Vec::with_capacity(w);
    for t in 0..w {
        let x_t = xm.slice_axis(Axis(2), Slice::from(t..t + 1)).to_owned();
        rec.push(cr_recurrent_step(&x_t, &mut state, &cr)?);
    }
    let views: Vec<_> = rec.iter().map(|o| o.view()).collect();
    let rec_stacked = ndarray::concatenate(Axis(2), &views)?.into_dyn();
    println!(
        "CR   parallel window vs {} stacked recurrent steps:  max |Δ| = {:.3e}",
        w,
        max_abs_diff(&loop_form, &rec_stacked)
    );

    println!("\nthe recurrent state per head is a {d}×{dh} matrix — independent of window length");
    Ok(())
}
