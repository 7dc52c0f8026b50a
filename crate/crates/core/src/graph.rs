//! The scene-context branch: directed interaction weights between entities,
//! edge convolution over per-frame node features, and the per-entity
//! recurrent update of the context hidden bank.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Two entities interact heuristically when their centres are closer than this.
pub const INTERACTION_RADIUS_MM: f64 = 1000.0;

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Row-major N×N identity.
pub fn identity_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Distance-rule adjacency: entry (i,j) is 1 when centres i and j are closer
/// than 1 m or i = j, then each row is normalized to sum to 1. The resulting
/// entries are exact reciprocals of the row counts, so the matrix is bitwise
/// reproducible whenever the underlying neighbour sets agree.
pub fn heuristic_adjacency(centers: &[[f64; 3]]) -> Vec<f64> {
    let n = centers.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let mut count = 0usize;
        for j in 0..n {
            if i == j || dist3(centers[i], centers[j]) < INTERACTION_RADIUS_MM {
                a[i * n + j] = 1.0;
                count += 1;
            }
        }
        let w = 1.0 / count as f64;
        for j in 0..n {
            a[i * n + j] *= w;
        }
    }
    a
}

// ── On-tape building blocks ───────────────────────────────────────────────

/// Parameter handles of one gated recurrent cell (update z, reset r,
/// candidate n). Shapes: `w_* : D×H`, `u_* : H×H`, `b_* : 1×H`.
#[derive(Clone, Copy)]
pub struct GruIds {
    pub wz: TensorId,
    pub uz: TensorId,
    pub bz: TensorId,
    pub wr: TensorId,
    pub ur: TensorId,
    pub br: TensorId,
    pub wn: TensorId,
    pub un: TensorId,
    pub bn: TensorId,
}

/// One GRU update applied independently to every row of `x` (N×D) and `h`
/// (N×H): z = σ(xWz+hUz+bz), r = σ(xWr+hUr+br),
/// n = tanh(xWn + r⊙(hUn) + bn), h' = (1−z)⊙n + z⊙h.
pub fn gru_step(tape: &mut Tape, x: TensorId, h: TensorId, g: &GruIds) -> Result<TensorId> {
    let gate = |tape: &mut Tape, w, u, b| -> Result<TensorId> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add_row_bias(s, b)
    };
    let z = gate(tape, g.wz, g.uz, g.bz)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, g.wr, g.ur, g.br)?;
    let r = tape.sigmoid(r);
    let hu = tape.matmul(h, g.un)?;
    let rh = tape.mul(r, hu)?;
    let xw = tape.matmul(x, g.wn)?;
    let pre = tape.add(xw, rh)?;
    let pre = tape.add_row_bias(pre, g.bn)?;
    let n = tape.tanh(pre);
    let (rows, cols) = tape.shape(h);
    let ones = tape.constant(rows, cols, vec![1.0; rows * cols])?;
    let omz = tape.sub(ones, z)?;
    let a = tape.mul(omz, n)?;
    let b = tape.mul(z, h)?;
    tape.add(a, b)
}

/// Edge convolution `R_i = relu(Σ_j Ã_ij · ([x_i ; x_i − x_j] · W))`
/// computed in fused matrix form: with s the row sums of Ã and W split into
/// its top and bottom halves, `R = relu(rowscale(X, s)·(W_top + W_bot) − (ÃX)·W_bot)`,
/// which is algebraically identical to the pairwise sum.
pub fn edge_convolution(tape: &mut Tape, x: TensorId, adj: TensorId, w: TensorId) -> Result<TensorId> {
    let (n, f_in) = tape.shape(x);
    let (ar, ac) = tape.shape(adj);
    if ar != n || ac != n {
        return Err(Error::ShapeMismatch { op: "edge_convolution adjacency", lhs: (n, f_in), rhs: (ar, ac) });
    }
    let (wr, _) = tape.shape(w);
    if wr != 2 * f_in {
        return Err(Error::ShapeMismatch { op: "edge_convolution weights", lhs: (n, f_in), rhs: tape.shape(w) });
    }
    let w_top = tape.slice_rows(w, 0, f_in)?;
    let w_bot = tape.slice_rows(w, f_in, f_in)?;
    let w_sum = tape.add(w_top, w_bot)?;
    let s = tape.row_sums(adj)?;
    let xs = tape.scale_rows(x, s)?;
    let term1 = tape.matmul(xs, w_sum)?;
    let ax = tape.matmul(adj, x)?;
    let term2 = tape.matmul(ax, w_bot)?;
    let pre = tape.sub(term1, term2)?;
    Ok(tape.relu(pre))
}

/// Slow pairwise reference for the edge convolution, summing the transformed
/// pair features `[x_i ; x_i − x_j]` explicitly. Used to verify the fused
/// implementation; never called on the hot path.
pub fn edge_convolution_pairwise(
    x: &[f64],
    n: usize,
    f_in: usize,
    adj: &[f64],
    w: &[f64],
    f_out: usize,
) -> Vec<f64> {
    assert_eq!(x.len(), n * f_in);
    assert_eq!(adj.len(), n * n);
    assert_eq!(w.len(), 2 * f_in * f_out);
    let mut out = vec![0.0; n * f_out];
    let mut pair = vec![0.0; 2 * f_in];
    for i in 0..n {
        for j in 0..n {
            for c in 0..f_in {
                pair[c] = x[i * f_in + c];
                pair[f_in + c] = x[i * f_in + c] - x[j * f_in + c];
            }
            let aij = adj[i * n + j];
            for o in 0..f_out {
                let mut acc = 0.0;
                for (c, &p) in pair.iter().enumerate() {
                    acc += p * w[c * f_out + o];
                }
                out[i * f_out + o] += aij * acc;
            }
        }
    }
    for v in &mut out {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Unnormalized directed interaction logits: entry (i,j) scores the influence
/// of entity j on entity i as `head([H_i ; H_i − H_j])`, a two-layer bias-free
/// map applied to every ordered pair including i = j.
pub fn predict_interactions(tape: &mut Tape, h: TensorId, w1: TensorId, w2: TensorId) -> Result<TensorId> {
    let (n, _hc) = tape.shape(h);
    let rep = tape.repeat_rows_each(h, n)?; // row i·n+j = H_i
    let til = tape.tile_rows(h, n)?; //         row i·n+j = H_j
    let diff = tape.sub(rep, til)?;
    let pair = tape.concat_cols(rep, diff)?;
    let mid = tape.matmul(pair, w1)?;
    let mid = tape.relu(mid);
    let logits = tape.matmul(mid, w2)?;
    let (lr, lc) = tape.shape(logits);
    if lc != 1 {
        return Err(Error::InvalidDimension {
            op: "predict_interactions",
            msg: format!("head must end in one output, got {lr}x{lc}"),
        });
    }
    tape.reshape(logits, n, n)
}

/// Row-wise softmax of square logits; every output row sums to 1.
pub fn normalize_interactions(tape: &mut Tape, logits: TensorId) -> Result<TensorId> {
    let (r, c) = tape.shape(logits);
    if r != c {
        return Err(Error::InvalidDimension {
            op: "normalize_interactions",
            msg: format!("adjacency must be square, got {r}x{c}"),
        });
    }
    tape.softmax_rows(logits)
}

/// One context update for a single frame: edge convolution over the frame's
/// node features followed by the shared recurrent cell.
pub fn context_frame_step(
    tape: &mut Tape,
    x: TensorId,
    adj: TensorId,
    ec_w: TensorId,
    gru: &GruIds,
    h: TensorId,
) -> Result<TensorId> {
    let r = edge_convolution(tape, x, adj, ec_w)?;
    gru_step(tape, r, h, gru)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum InteractionMode {
    /// Binary 1 m distance rule, row-normalized; constant w.r.t. parameters.
    Heuristic,
    /// Interactions predicted from the hidden bank and softmax-normalized;
    /// the first frame is pinned to the exact identity.
    Learned,
}

/// Parameter handles of the whole context branch.
#[derive(Clone, Copy)]
pub struct ContextIds {
    pub ec_w: TensorId,
    pub gru: GruIds,
    /// Interaction head `(w1, w2)`; required in learned mode.
    pub head: Option<(TensorId, TensorId)>,
}

/// Runs the context branch over the observed frames.
///
/// `xs[k]` is the N×F0 node-feature matrix of observed frame k and
/// `centers[k]` the matching entity centres (used by the heuristic rule).
/// The hidden bank starts at zeros. At the first frame the adjacency is the
/// exact identity (learned mode) or the heuristic matrix; afterwards learned
/// mode recomputes it from the current hidden bank every frame.
///
/// Returns the final hidden bank and the recorded per-frame adjacency values.
pub fn context_observe(
    tape: &mut Tape,
    xs: &[TensorId],
    centers: &[Vec<[f64; 3]>],
    mode: InteractionMode,
    ids: &ContextIds,
    context_hidden: usize,
) -> Result<(TensorId, Vec<Vec<f64>>)> {
    if xs.is_empty() {
        return Err(Error::InvalidDimension { op: "context_observe", msg: "no observed frames".into() });
    }
    if xs.len() != centers.len() {
        return Err(Error::InvalidDimension {
            op: "context_observe",
            msg: format!("{} feature frames but {} centre frames", xs.len(), centers.len()),
        });
    }
    let (n, _) = tape.shape(xs[0]);
    let head = match (mode, ids.head) {
        (InteractionMode::Learned, Some(h)) => Some(h),
        (InteractionMode::Learned, None) => {
            return Err(Error::Config { msg: "learned interactions need head parameters".into() })
        }
        (InteractionMode::Heuristic, _) => None,
    };
    let mut h = tape.constant(n, context_hidden, vec![0.0; n * context_hidden])?;
    let mut recorded = Vec::with_capacity(xs.len());
    for (k, (&x, frame_centers)) in xs.iter().zip(centers).enumerate() {
        let (xr, _) = tape.shape(x);
        if xr != n {
            return Err(Error::InvalidDimension {
                op: "context_observe",
                msg: format!("entity count changed mid-sequence: {n} then {xr}"),
            });
        }
        let adj = match (mode, k) {
            (InteractionMode::Learned, 0) => tape.constant(n, n, identity_matrix(n))?,
            (InteractionMode::Learned, _) => {
                let (w1, w2) = head.expect("checked above");
                let logits = predict_interactions(tape, h, w1, w2)?;
                normalize_interactions(tape, logits)?
            }
            (InteractionMode::Heuristic, _) => {
                tape.constant(n, n, heuristic_adjacency(frame_centers))?
            }
        };
        recorded.push(tape.value(adj).to_vec());
        h = context_frame_step(tape, x, adj, ids.ec_w, &ids.gru, h)?;
    }
    Ok((h, recorded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.01..1.0)).collect();
        for row in a.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        a
    }

    // ── Heuristic rule ──────────────────────────────────────────────────

    #[test]
    fn heuristic_close_pair_is_uniform() {
        let a = heuristic_adjacency(&[[0.0, 0.0, 0.0], [500.0, 0.0, 0.0]]);
        assert_eq!(a, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn heuristic_far_pair_is_identity() {
        let a = heuristic_adjacency(&[[0.0, 0.0, 0.0], [2000.0, 0.0, 0.0]]);
        assert_eq!(a, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn heuristic_single_entity() {
        assert_eq!(heuristic_adjacency(&[[3.0, 4.0, 5.0]]), vec![1.0]);
    }

    #[test]
    fn heuristic_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.gen_range(1..=6);
            let centers: Vec<[f64; 3]> =
                (0..n).map(|_| [rng.gen_range(-2000.0..2000.0), rng.gen_range(-2000.0..2000.0), 0.0]).collect();
            let a = heuristic_adjacency(&centers);
            for row in a.chunks(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    // ── Edge convolution ────────────────────────────────────────────────

    #[test]
    fn edge_conv_identity_adjacency_drops_pair_term() {
        // Ã = I makes x_i − x_j vanish, so only the top half of W acts.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (n, f_in, f_out) = (3, 4, 5);
        let x = randvec(&mut rng, n * f_in);
        let w = randvec(&mut rng, 2 * f_in * f_out);
        let mut tape = Tape::new();
        let xi = tape.constant(n, f_in, x.clone()).unwrap();
        let ai = tape.constant(n, n, identity_matrix(n)).unwrap();
        let wi = tape.constant(2 * f_in, f_out, w.clone()).unwrap();
        let r = edge_convolution(&mut tape, xi, ai, wi).unwrap();
        // reference: relu(x · w_top)
        let mut expect = vec![0.0; n * f_out];
        for i in 0..n {
            for o in 0..f_out {
                let mut acc = 0.0;
                for c in 0..f_in {
                    acc += x[i * f_in + c] * w[c * f_out + o];
                }
                expect[i * f_out + o] = acc.max(0.0);
            }
        }
        for (a, b) in tape.value(r).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_conv_selector_weights_pass_features_through() {
        // W = [I; 0] with nonnegative x and identity adjacency reproduces x.
        let (n, f) = (2, 3);
        let x = vec![0.5, 1.0, 0.0, 2.0, 0.25, 3.0];
        let mut w = vec![0.0; 2 * f * f];
        for c in 0..f {
            w[c * f + c] = 1.0;
        }
        let mut tape = Tape::new();
        let xi = tape.constant(n, f, x.clone()).unwrap();
        let ai = tape.constant(n, n, identity_matrix(n)).unwrap();
        let wi = tape.constant(2 * f, f, w).unwrap();
        let r = edge_convolution(&mut tape, xi, ai, wi).unwrap();
        for (a, b) in tape.value(r).iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_conv_matches_pairwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.gen_range(1..=6);
            let f_in = rng.gen_range(1..=7);
            let f_out = rng.gen_range(1..=7);
            let x = randvec(&mut rng, n * f_in);
            let w = randvec(&mut rng, 2 * f_in * f_out);
            let adj = random_stochastic(&mut rng, n);
            let mut tape = Tape::new();
            let xi = tape.constant(n, f_in, x.clone()).unwrap();
            let ai = tape.constant(n, n, adj.clone()).unwrap();
            let wi = tape.constant(2 * f_in, f_out, w.clone()).unwrap();
            let fused = edge_convolution(&mut tape, xi, ai, wi).unwrap();
            let reference = edge_convolution_pairwise(&x, n, f_in, &adj, &w, f_out);
            for (a, b) in tape.value(fused).iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12, "fused {a} vs pairwise {b}");
            }
        }
    }

    #[test]
    fn edge_conv_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (n, f_in, f_out) = (4, 3, 5);
        let x = randvec(&mut rng, n * f_in);
        let w = randvec(&mut rng, 2 * f_in * f_out);
        let adj = random_stochastic(&mut rng, n);
        let perm = [2usize, 0, 3, 1];
        let mut px = vec![0.0; n * f_in];
        let mut padj = vec![0.0; n * n];
        for i in 0..n {
            px[i * f_in..(i + 1) * f_in].copy_from_slice(&x[perm[i] * f_in..(perm[i] + 1) * f_in]);
            for j in 0..n {
                padj[i * n + j] = adj[perm[i] * n + perm[j]];
            }
        }
        let base = edge_convolution_pairwise(&x, n, f_in, &adj, &w, f_out);
        let permuted = edge_convolution_pairwise(&px, n, f_in, &padj, &w, f_out);
        for i in 0..n {
            for o in 0..f_out {
                let a = permuted[i * f_out + o];
                let b = base[perm[i] * f_out + o];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    // ── Interaction head ────────────────────────────────────────────────

    #[test]
    fn equal_hidden_rows_give_uniform_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (n, hc, mid) = (4, 6, 3);
        let row = randvec(&mut rng, hc);
        let mut h = Vec::new();
        for _ in 0..n {
            h.extend_from_slice(&row);
        }
        let w1 = randvec(&mut rng, 2 * hc * mid);
        let w2 = randvec(&mut rng, mid);
        let mut tape = Tape::new();
        let hi = tape.constant(n, hc, h).unwrap();
        let w1i = tape.constant(2 * hc, mid, w1).unwrap();
        let w2i = tape.constant(mid, 1, w2).unwrap();
        let logits = predict_interactions(&mut tape, hi, w1i, w2i).unwrap();
        let adj = normalize_interactions(&mut tape, logits).unwrap();
        for v in tape.value(adj) {
            assert!((v - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_weights_give_uniform_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (n, hc, mid) = (3, 5, 4);
        let h = randvec(&mut rng, n * hc);
        let mut tape = Tape::new();
        let hi = tape.constant(n, hc, h).unwrap();
        let w1i = tape.constant(2 * hc, mid, vec![0.0; 2 * hc * mid]).unwrap();
        let w2i = tape.constant(mid, 1, vec![0.0; mid]).unwrap();
        let logits = predict_interactions(&mut tape, hi, w1i, w2i).unwrap();
        assert!(tape.value(logits).iter().all(|&v| v == 0.0));
        let adj = normalize_interactions(&mut tape, logits).unwrap();
        for v in tape.value(adj) {
            assert!((v - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn logits_are_not_antisymmetric_in_general() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let (n, hc, mid) = (3, 4, 5);
        let h = randvec(&mut rng, n * hc);
        let w1 = randvec(&mut rng, 2 * hc * mid);
        let w2 = randvec(&mut rng, mid);
        let mut tape = Tape::new();
        let hi = tape.constant(n, hc, h).unwrap();
        let w1i = tape.constant(2 * hc, mid, w1).unwrap();
        let w2i = tape.constant(mid, 1, w2).unwrap();
        let logits = predict_interactions(&mut tape, hi, w1i, w2i).unwrap();
        let v = tape.value(logits);
        // entry (0,1) vs entry (1,0)
        assert!((v[1] - v[n]).abs() > 1e-6, "expected asymmetry, got {v:?}");
    }

    #[test]
    fn pair_feature_layout_matches_direct_evaluation() {
        // logits_ij must equal head([H_i ; H_i − H_j]) evaluated by hand.
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let (n, hc, mid) = (3, 4, 2);
        let h = randvec(&mut rng, n * hc);
        let w1 = randvec(&mut rng, 2 * hc * mid);
        let w2 = randvec(&mut rng, mid);
        let mut tape = Tape::new();
        let hi = tape.constant(n, hc, h.clone()).unwrap();
        let w1i = tape.constant(2 * hc, mid, w1.clone()).unwrap();
        let w2i = tape.constant(mid, 1, w2.clone()).unwrap();
        let logits = predict_interactions(&mut tape, hi, w1i, w2i).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut pair = vec![0.0; 2 * hc];
                for c in 0..hc {
                    pair[c] = h[i * hc + c];
                    pair[hc + c] = h[i * hc + c] - h[j * hc + c];
                }
                let mut midv = vec![0.0; mid];
                for (m, mv) in midv.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (c, &p) in pair.iter().enumerate() {
                        acc += p * w1[c * mid + m];
                    }
                    *mv = acc.max(0.0);
                }
                let expect: f64 = midv.iter().zip(&w2).map(|(a, b)| a * b).sum();
                let got = tape.value(logits)[i * n + j];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    // ── Normalization ───────────────────────────────────────────────────

    #[test]
    fn normalize_single_entity_is_exactly_one() {
        let mut tape = Tape::new();
        let l = tape.constant(1, 1, vec![-7.25]).unwrap();
        let a = normalize_interactions(&mut tape, l).unwrap();
        assert_eq!(tape.value(a), &[1.0]);
    }

    #[test]
    fn normalize_analytic_row() {
        let mut tape = Tape::new();
        let l = tape.constant(2, 2, vec![3.0f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        let a = normalize_interactions(&mut tape, l).unwrap();
        let v = tape.value(a);
        assert!((v[0] - 0.75).abs() < 1e-12);
        assert!((v[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_rectangular() {
        let mut tape = Tape::new();
        let l = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        assert!(normalize_interactions(&mut tape, l).is_err());
    }

    // ── Recurrent update ────────────────────────────────────────────────

    fn zero_gru(tape: &mut Tape, d: usize, h: usize) -> GruIds {
        let w = |t: &mut Tape| t.leaf(d, h, vec![0.0; d * h]).unwrap();
        let u = |t: &mut Tape| t.leaf(h, h, vec![0.0; h * h]).unwrap();
        let b = |t: &mut Tape| t.leaf(1, h, vec![0.0; h]).unwrap();
        GruIds {
            wz: w(tape), uz: u(tape), bz: b(tape),
            wr: w(tape), ur: u(tape), br: b(tape),
            wn: w(tape), un: u(tape), bn: b(tape),
        }
    }

    fn random_gru(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize, h: usize) -> (GruIds, Vec<Vec<f64>>) {
        let mut raw = Vec::new();
        let mk = |t: &mut Tape, r: usize, c: usize, rng: &mut ChaCha8Rng, raw: &mut Vec<Vec<f64>>| {
            let data = randvec(rng, r * c);
            raw.push(data.clone());
            t.leaf(r, c, data).unwrap()
        };
        let ids = GruIds {
            wz: mk(tape, d, h, rng, &mut raw), uz: mk(tape, h, h, rng, &mut raw), bz: mk(tape, 1, h, rng, &mut raw),
            wr: mk(tape, d, h, rng, &mut raw), ur: mk(tape, h, h, rng, &mut raw), br: mk(tape, 1, h, rng, &mut raw),
            wn: mk(tape, d, h, rng, &mut raw), un: mk(tape, h, h, rng, &mut raw), bn: mk(tape, 1, h, rng, &mut raw),
        };
        (ids, raw)
    }

    /// Scalar reference of the same GRU convention, one row at a time.
    fn gru_reference(x: &[f64], h: &[f64], raw: &[Vec<f64>], d: usize, hw: usize) -> Vec<f64> {
        let (wz, uz, bz, wr, ur, br, wn, un, bn) =
            (&raw[0], &raw[1], &raw[2], &raw[3], &raw[4], &raw[5], &raw[6], &raw[7], &raw[8]);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut out = vec![0.0; hw];
        for o in 0..hw {
            let mut zx = bz[o];
            let mut rx = br[o];
            let mut nx = bn[o];
            for c in 0..d {
                zx += x[c] * wz[c * hw + o];
                rx += x[c] * wr[c * hw + o];
                nx += x[c] * wn[c * hw + o];
            }
            let mut zh = 0.0;
            let mut rh = 0.0;
            let mut nh = 0.0;
            for c in 0..hw {
                zh += h[c] * uz[c * hw + o];
                rh += h[c] * ur[c * hw + o];
                nh += h[c] * un[c * hw + o];
            }
            let z = sig(zx + zh);
            let r = sig(rx + rh);
            let n = (nx + r * nh).tanh();
            out[o] = (1.0 - z) * n + z * h[o];
        }
        out
    }

    #[test]
    fn zero_parameters_halve_the_hidden_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (n, d, hw) = (3, 4, 5);
        let x = randvec(&mut rng, n * d);
        let h = randvec(&mut rng, n * hw);
        let mut tape = Tape::new();
        let ids = zero_gru(&mut tape, d, hw);
        let xi = tape.constant(n, d, x).unwrap();
        let hi = tape.constant(n, hw, h.clone()).unwrap();
        let out = gru_step(&mut tape, xi, hi, &ids).unwrap();
        for (a, b) in tape.value(out).iter().zip(&h) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let (n, d, hw) = (2, 3, 4);
        let x = randvec(&mut rng, n * d);
        let h = randvec(&mut rng, n * hw);
        let mut tape = Tape::new();
        let (ids, raw) = random_gru(&mut tape, &mut rng, d, hw);
        let xi = tape.constant(n, d, x.clone()).unwrap();
        let hi = tape.constant(n, hw, h.clone()).unwrap();
        let out = gru_step(&mut tape, xi, hi, &ids).unwrap();
        for row in 0..n {
            let expect = gru_reference(&x[row * d..(row + 1) * d], &h[row * hw..(row + 1) * hw], &raw, d, hw);
            let got = &tape.value(out)[row * hw..(row + 1) * hw];
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_is_row_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n, d, hw) = (3, 4, 5);
        let x = randvec(&mut rng, n * d);
        let h = randvec(&mut rng, n * hw);
        let perm = [1usize, 2, 0];
        let mut tape = Tape::new();
        let (ids, _) = random_gru(&mut tape, &mut rng, d, hw);
        let xi = tape.constant(n, d, x.clone()).unwrap();
        let hi = tape.constant(n, hw, h.clone()).unwrap();
        let out = gru_step(&mut tape, xi, hi, &ids).unwrap();
        let base = tape.value(out).to_vec();
        let mut px = vec![0.0; n * d];
        let mut ph = vec![0.0; n * hw];
        for i in 0..n {
            px[i * d..(i + 1) * d].copy_from_slice(&x[perm[i] * d..(perm[i] + 1) * d]);
            ph[i * hw..(i + 1) * hw].copy_from_slice(&h[perm[i] * hw..(perm[i] + 1) * hw]);
        }
        let pxi = tape.constant(n, d, px).unwrap();
        let phi = tape.constant(n, hw, ph).unwrap();
        let pout = gru_step(&mut tape, pxi, phi, &ids).unwrap();
        for i in 0..n {
            for o in 0..hw {
                assert_eq!(tape.value(pout)[i * hw + o], base[perm[i] * hw + o]);
            }
        }
    }

    // ── Observation loop ────────────────────────────────────────────────

    #[allow(clippy::too_many_arguments)]
    fn observe_fixture(
        tape: &mut Tape,
        rng: &mut ChaCha8Rng,
        n: usize,
        f0: usize,
        hc: usize,
        mid: usize,
        frames: usize,
        learned: bool,
    ) -> (Vec<TensorId>, Vec<Vec<[f64; 3]>>, ContextIds) {
        let xs: Vec<TensorId> = (0..frames)
            .map(|_| {
                let d = randvec(rng, n * f0);
                tape.constant(n, f0, d).unwrap()
            })
            .collect();
        let centers: Vec<Vec<[f64; 3]>> = (0..frames)
            .map(|_| {
                (0..n)
                    .map(|_| [rng.gen_range(-1500.0..1500.0), rng.gen_range(-1500.0..1500.0), 0.0])
                    .collect()
            })
            .collect();
        let ec_w = {
            let d = randvec(rng, 2 * f0 * hc);
            tape.leaf(2 * f0, hc, d).unwrap()
        };
        let (gru, _) = random_gru(tape, rng, hc, hc);
        let head = if learned {
            let w1 = randvec(rng, 2 * hc * mid);
            let w2 = randvec(rng, mid);
            Some((tape.leaf(2 * hc, mid, w1).unwrap(), tape.leaf(mid, 1, w2).unwrap()))
        } else {
            None
        };
        (xs, centers, ContextIds { ec_w, gru, head })
    }

    #[test]
    fn learned_first_frame_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut tape = Tape::new();
        let (xs, centers, ids) = observe_fixture(&mut tape, &mut rng, 4, 6, 5, 3, 5, true);
        let (_, recorded) =
            context_observe(&mut tape, &xs, &centers, InteractionMode::Learned, &ids, 5).unwrap();
        assert_eq!(recorded.len(), 5);
        assert_eq!(recorded[0], identity_matrix(4));
        // later frames must be row-stochastic but generally not identity
        for adj in &recorded[1..] {
            for row in adj.chunks(4) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_entity_scene_records_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for learned in [true, false] {
            let mut tape = Tape::new();
            let (xs, centers, ids) = observe_fixture(&mut tape, &mut rng, 1, 4, 3, 2, 4, learned);
            let mode = if learned { InteractionMode::Learned } else { InteractionMode::Heuristic };
            let (_, recorded) = context_observe(&mut tape, &xs, &centers, mode, &ids, 3).unwrap();
            for adj in recorded {
                assert_eq!(adj, vec![1.0]);
            }
        }
    }

    #[test]
    fn heuristic_series_ignores_parameters() {
        // Heuristic adjacencies depend only on geometry, so two different
        // parameter draws record identical series.
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut tape = Tape::new();
        let (xs, centers, ids) = observe_fixture(&mut tape, &mut rng, 3, 5, 4, 2, 6, false);
        let (_, rec1) =
            context_observe(&mut tape, &xs, &centers, InteractionMode::Heuristic, &ids, 4).unwrap();
        let mut tape2 = Tape::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let xs2: Vec<TensorId> = xs
            .iter()
            .map(|&x| {
                let (r, c) = tape.shape(x);
                let v = tape.value(x).to_vec();
                tape2.constant(r, c, v).unwrap()
            })
            .collect();
        let ec_w = {
            let d = randvec(&mut rng2, 2 * 5 * 4);
            tape2.leaf(10, 4, d).unwrap()
        };
        let (gru, _) = random_gru(&mut tape2, &mut rng2, 4, 4);
        let ids2 = ContextIds { ec_w, gru, head: None };
        let (_, rec2) =
            context_observe(&mut tape2, &xs2, &centers, InteractionMode::Heuristic, &ids2, 4).unwrap();
        assert_eq!(rec1, rec2);
    }

    #[test]
    fn context_branch_gradients_pass_fd() {
        // Small learned-mode unroll; checks the edge-convolution weights and
        // the interaction head through softmax, convolution, and recurrence.
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let (n, f0, hc, mid, frames) = (3, 4, 3, 2, 3);
        let xs_data: Vec<Vec<f64>> = (0..frames).map(|_| randvec(&mut rng, n * f0)).collect();
        let gru_data: Vec<Vec<f64>> = {
            let mut v = Vec::new();
            for _ in 0..3 {
                v.push(randvec(&mut rng, hc * hc)); // w
                v.push(randvec(&mut rng, hc * hc)); // u
                v.push(randvec(&mut rng, hc)); // b
            }
            v
        };
        let w1_data = randvec(&mut rng, 2 * hc * mid);
        let w2_data = randvec(&mut rng, mid);
        let ec_data = randvec(&mut rng, 2 * f0 * hc);
        let target = randvec(&mut rng, n * hc);

        let build = |ec: &[f64], w1: &[f64], w2: &[f64]| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let ec_w = tape.leaf(2 * f0, hc, ec.to_vec()).unwrap();
            let gru = GruIds {
                wz: tape.constant(hc, hc, gru_data[0].clone()).unwrap(),
                uz: tape.constant(hc, hc, gru_data[1].clone()).unwrap(),
                bz: tape.constant(1, hc, gru_data[2].clone()).unwrap(),
                wr: tape.constant(hc, hc, gru_data[3].clone()).unwrap(),
                ur: tape.constant(hc, hc, gru_data[4].clone()).unwrap(),
                br: tape.constant(1, hc, gru_data[5].clone()).unwrap(),
                wn: tape.constant(hc, hc, gru_data[6].clone()).unwrap(),
                un: tape.constant(hc, hc, gru_data[7].clone()).unwrap(),
                bn: tape.constant(1, hc, gru_data[8].clone()).unwrap(),
            };
            let w1i = tape.leaf(2 * hc, mid, w1.to_vec()).unwrap();
            let w2i = tape.leaf(mid, 1, w2.to_vec()).unwrap();
            let xs: Vec<TensorId> =
                xs_data.iter().map(|d| tape.constant(n, f0, d.clone()).unwrap()).collect();
            let centers = vec![vec![[0.0; 3]; n]; frames];
            let ids = ContextIds { ec_w, gru, head: Some((w1i, w2i)) };
            let (h, _) = context_observe(&mut tape, &xs, &centers, InteractionMode::Learned, &ids, hc).unwrap();
            let t = tape.constant(n, hc, target.clone()).unwrap();
            let d = tape.sub(h, t).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward(loss).unwrap();
            (
                tape.value(loss)[0],
                tape.grad(ec_w).to_vec(),
                tape.grad(w1i).to_vec(),
                tape.grad(w2i).to_vec(),
            )
        };

        let (_, g_ec, g_w1, g_w2) = build(&ec_data, &w1_data, &w2_data);
        let h = 1e-5;
        let fd_check = |analytic: &[f64], data: &[f64], which: usize| {
            let mut fd = vec![0.0; data.len()];
            for i in 0..data.len() {
                let mut up = data.to_vec();
                up[i] += h;
                let mut dn = data.to_vec();
                dn[i] -= h;
                let (lu, ..) = match which {
                    0 => build(&up, &w1_data, &w2_data),
                    1 => build(&ec_data, &up, &w2_data),
                    _ => build(&ec_data, &w1_data, &up),
                };
                let (ld, ..) = match which {
                    0 => build(&dn, &w1_data, &w2_data),
                    1 => build(&ec_data, &dn, &w2_data),
                    _ => build(&ec_data, &w1_data, &dn),
                };
                fd[i] = (lu - ld) / (2.0 * h);
            }
            let diff: f64 =
                analytic.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let na: f64 = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rel = diff / na.max(nb).max(1e-12);
            assert!(rel < 1e-4, "context gradient rel err {rel}");
        };
        fd_check(&g_ec, &ec_data, 0);
        fd_check(&g_w1, &w1_data, 1);
        fd_check(&g_w2, &w2_data, 2);
    }
}
