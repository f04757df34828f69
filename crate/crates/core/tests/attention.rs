mod common;
mod oracles;

use std::path::PathBuf;

use m2m_core::attention::{
    additive_attention_head, attention_block, mhsa_tm, refine, rope_rotate, vanilla_attention_head,
    AxisPartition, BlockParams, HeadParams, LayerNormParams, MhsaParams, MlpParams, Positions,
    RefinerConfig, RefinerParams, RopeConfig, RopeTable, StackConfig,
};
use m2m_core::{Error, Tensor, Var};
use oracles::{HeadWeights, Rows};
use proptest::prelude::*;

use common::{grad_check, randn, rng};

fn head(d_in: usize, d_h: usize, seed: u64) -> HeadParams<Tensor> {
    let mut r = rng(seed);
    let s = 1.0 / (d_in as f64).sqrt();
    HeadParams {
        w_q: Tensor::randn(&[d_in, d_h], s, &mut r),
        w_k: Tensor::randn(&[d_in, d_h], s, &mut r),
        w_v: Tensor::randn(&[d_in, d_h], s, &mut r),
        q_pool: Tensor::randn(&[d_h], 1.0, &mut r),
        k_pool: Tensor::randn(&[d_h], 1.0, &mut r),
    }
}

fn consts(h: &HeadParams<Tensor>) -> HeadParams<Var> {
    HeadParams {
        w_q: Var::constant(h.w_q.clone()),
        w_k: Var::constant(h.w_k.clone()),
        w_v: Var::constant(h.w_v.clone()),
        q_pool: Var::constant(h.q_pool.clone()),
        k_pool: Var::constant(h.k_pool.clone()),
    }
}

fn weights(h: &HeadParams<Tensor>) -> HeadWeights<'_> {
    HeadWeights { w_q: &h.w_q, w_k: &h.w_k, w_v: &h.w_v, q_pool: &h.q_pool, k_pool: &h.k_pool }
}

fn additive(x: &Tensor, h: &HeadParams<Tensor>, rope: Option<&RopeTable>, tau: f64) -> Tensor {
    additive_attention_head(&Var::constant(x.clone()), &consts(h), rope, tau)
        .unwrap()
        .value()
        .clone()
}

fn small_stack() -> StackConfig {
    StackConfig::new(1, 2, 4)
}

fn block_params(s: &StackConfig, seed: u64) -> BlockParams<Tensor> {
    let mut r = rng(seed);
    let mut n = |shape: &[usize]| Tensor::randn(shape, 0.5, &mut r);
    BlockParams {
        ln1: LayerNormParams { gamma: n(&[s.d_in]).map(|v| 1.0 + v), beta: n(&[s.d_in]) },
        attn: MhsaParams {
            heads: (0..s.n_heads as u64).map(|i| head(s.d_in, s.d_head, seed.wrapping_mul(31).wrapping_add(i))).collect(),
            w_o: n(&[s.d_in, s.d_in]),
            b_o: n(&[s.d_in]),
        },
        ln2: LayerNormParams { gamma: n(&[s.d_in]).map(|v| 1.0 + v), beta: n(&[s.d_in]) },
        mlp: MlpParams {
            w1: n(&[s.d_in, s.mlp_hidden]),
            b1: n(&[s.mlp_hidden]),
            w2: n(&[s.mlp_hidden, s.d_in]),
            b2: n(&[s.d_in]),
        },
    }
}

fn block_vars(b: &BlockParams<Tensor>) -> BlockParams<Var> {
    let c = |t: &Tensor| Var::constant(t.clone());
    BlockParams {
        ln1: LayerNormParams { gamma: c(&b.ln1.gamma), beta: c(&b.ln1.beta) },
        attn: MhsaParams {
            heads: b.attn.heads.iter().map(consts).collect(),
            w_o: c(&b.attn.w_o),
            b_o: c(&b.attn.b_o),
        },
        ln2: LayerNormParams { gamma: c(&b.ln2.gamma), beta: c(&b.ln2.beta) },
        mlp: MlpParams { w1: c(&b.mlp.w1), b1: c(&b.mlp.b1), w2: c(&b.mlp.w2), b2: c(&b.mlp.b2) },
    }
}

fn refiner_config(channels: usize, grid: (usize, usize), stack: StackConfig) -> RefinerConfig {
    RefinerConfig { channels, grid, stack, rope: RopeConfig::default() }
}

fn table(grid: (usize, usize), d_head: usize) -> RopeTable {
    RopeTable::new(&Positions::for_grid(grid.0, grid.1), &RopeConfig::default(), d_head).unwrap()
}

fn rows(t: &Tensor) -> Rows {
    oracles::rows(t)
}

// ---- additive attention ----

#[test]
fn additive_single_token_is_v_k_q_product() {
    let h = head(3, 4, 1);
    let x = randn(&[1, 3], 2);
    let out = additive(&x, &h, None, 0.5);
    let q = x.matmul(&h.w_q).unwrap();
    let k = x.matmul(&h.w_k).unwrap();
    let v = x.matmul(&h.w_v).unwrap();
    let want = v.mul(&k).unwrap().mul(&q).unwrap();
    assert!(out.max_abs_diff(&want) < 1e-12);
}

#[test]
fn additive_identical_rows_give_identical_outputs() {
    let h = head(4, 4, 3);
    let row = randn(&[1, 4], 4);
    let x = Tensor::from_fn(&[7, 4], |i| row.at(&[0, i[1]]));
    let out = additive(&x, &h, None, 0.5);
    for t in 1..7 {
        for d in 0..4 {
            assert!((out.at(&[t, d]) - out.at(&[0, d])).abs() < 1e-12);
        }
    }
}

#[test]
fn additive_small_example_matches_loops() {
    let h = head(3, 3, 5);
    let x = randn(&[5, 3], 6);
    let out = additive(&x, &h, None, 1.0 / 3f64.sqrt());
    let want = oracles::additive_head(&rows(&x), &weights(&h), 1.0 / 3f64.sqrt(), None);
    assert!(oracles::max_abs_diff(&want, &out) < 1e-10);
}

#[test]
fn additive_rejects_misshapen_input() {
    let h = consts(&head(3, 2, 0));
    let x = Var::constant(Tensor::zeros(&[4, 5]));
    assert!(matches!(additive_attention_head(&x, &h, None, 1.0), Err(Error::ShapeMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn additive_matches_loops(t in 1usize..=64, d_in in 1usize..=8, d_h in 1usize..=8, seed in any::<u64>()) {
        let h = head(d_in, d_h, seed);
        let x = randn(&[t, d_in], seed ^ 1);
        let tau = 1.0 / (d_h as f64).sqrt();
        let out = additive(&x, &h, None, tau);
        let want = oracles::additive_head(&rows(&x), &weights(&h), tau, None);
        prop_assert!(oracles::max_abs_diff(&want, &out) < 1e-10);
    }

    #[test]
    fn rotary_additive_matches_loops(gh in 1usize..=2, gw in 1usize..=2, quarter in 1usize..=2, seed in any::<u64>()) {
        let d_h = 4 * quarter;
        let t = gh * gw * gh * gw;
        let h = head(6, d_h, seed);
        let x = randn(&[t, 6], seed ^ 2);
        let angles: Vec<Vec<f64>> = Positions::for_grid(gh, gw)
            .coords
            .iter()
            .map(|&c| oracles::flattened_angles(c, gw, d_h, 10_000.0))
            .collect();
        let out = additive(&x, &h, Some(&table((gh, gw), d_h)), 0.5);
        let want = oracles::additive_head(&rows(&x), &weights(&h), 0.5, Some(&angles));
        prop_assert!(oracles::max_abs_diff(&want, &out) < 1e-10);
    }

    #[test]
    fn additive_is_permutation_equivariant(t in 2usize..=32, seed in any::<u64>()) {
        let h = head(5, 4, seed);
        let x = randn(&[t, 5], seed ^ 3);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.rotate_left((seed % t as u64) as usize);
        perm.swap(0, t - 1);
        let px = Tensor::from_fn(&[t, 5], |i| x.at(&[perm[i[0]], i[1]]));
        let out = additive(&x, &h, None, 0.5);
        let pout = additive(&px, &h, None, 0.5);
        for r in 0..t {
            for d in 0..4 {
                prop_assert!((pout.at(&[r, d]) - out.at(&[perm[r], d])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn additive_stays_finite_for_unit_gaussian_params(t in 1usize..=64, seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = HeadParams {
            w_q: Tensor::randn(&[8, 4], 1.0, &mut r),
            w_k: Tensor::randn(&[8, 4], 1.0, &mut r),
            w_v: Tensor::randn(&[8, 4], 1.0, &mut r),
            q_pool: Tensor::randn(&[4], 1.0, &mut r),
            k_pool: Tensor::randn(&[4], 1.0, &mut r),
        };
        let x = Tensor::randn(&[t, 8], 1.0, &mut r);
        prop_assert!(additive(&x, &h, None, 0.5).is_finite());
    }
}

// ---- vanilla attention ----

fn vanilla(x: &Tensor, h: &HeadParams<Tensor>, tau: f64) -> Tensor {
    vanilla_attention_head(&Var::constant(x.clone()), &consts(h), tau, 4096)
        .unwrap()
        .value()
        .clone()
}

#[test]
fn vanilla_single_token_returns_v() {
    let h = head(3, 2, 7);
    let x = randn(&[1, 3], 8);
    assert!(vanilla(&x, &h, 0.7).max_abs_diff(&x.matmul(&h.w_v).unwrap()) < 1e-12);
}

#[test]
fn vanilla_uniform_keys_average_values() {
    let mut h = head(3, 2, 9);
    h.w_k = Tensor::zeros(&[3, 2]);
    let x = randn(&[6, 3], 10);
    let v = x.matmul(&h.w_v).unwrap();
    let out = vanilla(&x, &h, 1.0);
    for d in 0..2 {
        let mean = (0..6).map(|t| v.at(&[t, d])).sum::<f64>() / 6.0;
        for t in 0..6 {
            assert!((out.at(&[t, d]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn vanilla_matches_loops_and_respects_ceiling() {
    let h = head(4, 4, 11);
    let x = randn(&[6, 4], 12);
    let want = oracles::vanilla_head(&rows(&x), &weights(&h), 0.5);
    assert!(oracles::max_abs_diff(&want, &vanilla(&x, &h, 0.5)) < 1e-10);
    let over = vanilla_attention_head(&Var::constant(x), &consts(&h), 0.5, 5);
    assert!(matches!(over, Err(Error::CeilingExceeded { len: 6, ceiling: 5 })));
}

// ---- multi-head and block ----

#[test]
fn single_head_identity_projection_is_the_head() {
    let h = head(4, 4, 13);
    let x = randn(&[5, 4], 14);
    let attn = MhsaParams {
        heads: vec![consts(&h)],
        w_o: Var::constant(Tensor::eye(4)),
        b_o: Var::constant(Tensor::zeros(&[4])),
    };
    let out = mhsa_tm(&Var::constant(x.clone()), &attn, None, 0.5).unwrap();
    assert!(out.value().max_abs_diff(&additive(&x, &h, None, 0.5)) < 1e-12);

    let shifted = MhsaParams { b_o: Var::constant(Tensor::full(&[4], 2.5)), ..attn };
    let out2 = mhsa_tm(&Var::constant(x), &shifted, None, 0.5).unwrap();
    let diff = out2.value().sub(out.value()).unwrap();
    assert!(diff.data().iter().all(|d| (d - 2.5).abs() < 1e-12));
}

#[test]
fn multi_head_concatenates_then_projects() {
    let s = small_stack();
    let b = block_params(&s, 15);
    let x = randn(&[9, s.d_in], 16);
    let out = mhsa_tm(&Var::constant(x.clone()), &block_vars(&b).attn, None, 0.5).unwrap();
    let heads: Vec<Rows> = b
        .attn
        .heads
        .iter()
        .map(|h| oracles::additive_head(&rows(&x), &weights(h), 0.5, None))
        .collect();
    let cat: Rows = (0..9).map(|t| heads.iter().flat_map(|h| h[t].clone()).collect()).collect();
    let want = oracles::add_bias(&oracles::project(&cat, &b.attn.w_o), &b.attn.b_o);
    assert!(oracles::max_abs_diff(&want, out.value()) < 1e-10);
}

#[test]
fn zero_output_projections_make_the_block_an_identity() {
    let s = small_stack();
    let mut b = block_params(&s, 17);
    b.attn.w_o = Tensor::zeros(&[s.d_in, s.d_in]);
    b.attn.b_o = Tensor::zeros(&[s.d_in]);
    b.mlp.w2 = Tensor::zeros(&[s.mlp_hidden, s.d_in]);
    b.mlp.b2 = Tensor::zeros(&[s.d_in]);
    let x = randn(&[16, s.d_in], 18);
    let out = attention_block(&Var::constant(x.clone()), &block_vars(&b), None, &s).unwrap();
    assert_eq!(out.shape(), x.shape());
    assert!(out.value().max_abs_diff(&x) < 1e-15);
}

#[test]
fn block_composes_pre_norm_residuals() {
    let s = small_stack();
    let b = block_params(&s, 19);
    let grid = (2, 2);
    let rope = table(grid, s.d_head);
    let x = randn(&[16, s.d_in], 20);
    let out = attention_block(&Var::constant(x.clone()), &block_vars(&b), Some(&rope), &s).unwrap();

    let angles: Vec<Vec<f64>> = Positions::for_grid(2, 2)
        .coords
        .iter()
        .map(|&c| oracles::flattened_angles(c, 2, s.d_head, 10_000.0))
        .collect();
    let xr = rows(&x);
    let a = oracles::layer_norm(&xr, &b.ln1.gamma, &b.ln1.beta, s.ln_eps);
    let heads: Vec<Rows> = b
        .attn
        .heads
        .iter()
        .map(|h| oracles::additive_head(&a, &weights(h), s.tau_attn, Some(&angles)))
        .collect();
    let cat: Rows = (0..16).map(|t| heads.iter().flat_map(|h| h[t].clone()).collect()).collect();
    let y = oracles::add(&xr, &oracles::add_bias(&oracles::project(&cat, &b.attn.w_o), &b.attn.b_o));
    let n = oracles::layer_norm(&y, &b.ln2.gamma, &b.ln2.beta, s.ln_eps);
    let hid: Rows = oracles::add_bias(&oracles::project(&n, &b.mlp.w1), &b.mlp.b1)
        .into_iter()
        .map(|r| r.into_iter().map(oracles::gelu).collect())
        .collect();
    let z = oracles::add(&y, &oracles::add_bias(&oracles::project(&hid, &b.mlp.w2), &b.mlp.b2));
    assert!(oracles::max_abs_diff(&z, out.value()) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn block_stays_finite_for_unit_gaussian_params(t in 1usize..=40, seed in any::<u64>()) {
        let s = small_stack();
        let mut b = block_params(&s, seed);
        let mut r = rng(seed ^ 4);
        b.attn.w_o = Tensor::randn(&[s.d_in, s.d_in], 1.0, &mut r);
        b.mlp.w1 = Tensor::randn(&[s.d_in, s.mlp_hidden], 1.0, &mut r);
        b.mlp.w2 = Tensor::randn(&[s.mlp_hidden, s.d_in], 1.0, &mut r);
        let x = Tensor::randn(&[t, s.d_in], 1.0, &mut r);
        let out = attention_block(&Var::constant(x), &block_vars(&b), None, &s).unwrap();
        prop_assert!(out.value().is_finite());
    }
}

// ---- refinement stack ----

fn init_refiner(cfg: &RefinerConfig, seed: u64) -> RefinerParams<Tensor> {
    RefinerParams::init(cfg, &mut rng(seed)).unwrap()
}

fn run_refine(c: &Tensor, params: &RefinerParams<Tensor>, cfg: &RefinerConfig) -> Tensor {
    let rope = table(cfg.grid, cfg.stack.d_head);
    refine(&Var::constant(c.clone()), &params.to_constants(), cfg, Some(&rope))
        .unwrap()
        .value()
        .clone()
}

#[test]
fn refine_doubles_every_spatial_axis() {
    let cfg = refiner_config(3, (8, 8), small_stack());
    let c = Tensor::rand_uniform(&[3, 8, 8, 8, 8], 0.0, 1.0, &mut rng(21));
    let out = run_refine(&c, &init_refiner(&cfg, 22), &cfg);
    assert_eq!(out.shape(), &[16, 16, 16, 16]);
    assert!(out.is_finite());
}

#[test]
fn blockless_refine_upsamples_the_channel_mean() {
    let mut stack = StackConfig::new(0, 1, 4);
    stack.d_in = 4;
    let cfg = refiner_config(4, (3, 3), stack);
    let mut params = init_refiner(&cfg, 23);
    params.w_in = Tensor::eye(4);
    let c = Tensor::rand_uniform(&[4, 3, 3, 3, 3], 0.0, 1.0, &mut rng(24));
    let out = run_refine(&c, &params, &cfg);
    let mean = Var::constant(c).sum_axis(0).unwrap().scale(0.25).reshape(&[3, 3, 3, 3]).unwrap();
    let want = mean.bilinear_resize(&[0, 1, 2, 3], &[6, 6, 6, 6]).unwrap();
    assert!(out.max_abs_diff(want.value()) < 1e-12);
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/refine_seed31.json")
}

#[test]
fn refine_matches_golden_output() {
    let cfg = refiner_config(2, (3, 3), small_stack());
    let c = Tensor::rand_uniform(&[2, 3, 3, 3, 3], 0.0, 1.0, &mut rng(30));
    let out = run_refine(&c, &init_refiner(&cfg, 31), &cfg);
    let path = golden_path();
    if std::env::var_os("M2M_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string(out.data()).unwrap()).unwrap();
    }
    let golden: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let want = Tensor::new(&[6, 6, 6, 6], golden).unwrap();
    assert!(out.max_abs_diff(&want) < 1e-12);
}

#[test]
fn refine_gradients_match_finite_differences() {
    let cfg = refiner_config(2, (3, 3), small_stack());
    let params = init_refiner(&cfg, 32);
    let rope = table((3, 3), 4);
    let c = Tensor::rand_uniform(&[2, 3, 3, 3, 3], 0.0, 1.0, &mut rng(33));
    let mut inputs = vec![c];
    inputs.extend(params.flat().into_iter().map(|(_, t)| t));
    let err = grad_check(&inputs, |vars| {
        let mut it = vars[1..].iter().cloned();
        let bound = params.map(|_, _| it.next().expect("one var per parameter"));
        refine(&vars[0], &bound, &cfg, Some(&rope))
    });
    assert!(err < common::GRAD_TOL, "relative error {err}");
}

#[test]
fn rotary_refine_requires_a_matching_table() {
    let cfg = refiner_config(2, (3, 3), small_stack());
    let params = init_refiner(&cfg, 34).to_constants();
    let c = Var::constant(Tensor::zeros(&[2, 3, 3, 3, 3]));
    assert!(refine(&c, &params, &cfg, None).is_err());
    assert!(refine(&c, &params, &cfg, Some(&table((2, 2), 4))).is_err());
    let wrong_l = Var::constant(Tensor::zeros(&[3, 3, 3, 3, 3]));
    assert!(refine(&wrong_l, &params, &cfg, Some(&table((3, 3), 4))).is_err());
}

// ---- rotary embedding ----

fn rope_cfg(per_axis: bool) -> RopeConfig {
    let partition = if per_axis { AxisPartition::PerAxis } else { AxisPartition::Flattened };
    RopeConfig { partition, ..RopeConfig::default() }
}

fn rotate_one(v: &Tensor, coord: [i64; 4], w: usize, cfg: &RopeConfig) -> Tensor {
    let p = Positions { grid: (w, w), coords: vec![coord] };
    rope_rotate(v, &p, cfg).unwrap()
}

fn coord() -> impl Strategy<Value = [i64; 4]> {
    prop::array::uniform4(-20i64..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rotated_scores_depend_only_on_offsets(
        a in coord(), b in coord(), s in coord(), per_axis in any::<bool>(), seed in any::<u64>()
    ) {
        let cfg = rope_cfg(per_axis);
        let w = 5;
        let q = randn(&[1, 8], seed);
        let k = randn(&[1, 8], seed ^ 5);
        let shift = |c: [i64; 4]| [c[0] + s[0], c[1] + s[1], c[2] + s[2], c[3] + s[3]];
        let dot = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>();
        let base = dot(&rotate_one(&q, a, w, &cfg), &rotate_one(&k, b, w, &cfg));
        let moved = dot(&rotate_one(&q, shift(a), w, &cfg), &rotate_one(&k, shift(b), w, &cfg));
        prop_assert!((base - moved).abs() < 1e-9, "{base} vs {moved}");
    }

    #[test]
    fn rotation_preserves_norms(c in coord(), per_axis in any::<bool>(), seed in any::<u64>()) {
        let cfg = rope_cfg(per_axis);
        let v = randn(&[1, 16], seed);
        let r = rotate_one(&v, c, 4, &cfg);
        let norm = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm(&v) - norm(&r)).abs() < 1e-12);
    }
}

#[test]
fn rotation_at_the_origin_is_identity() {
    let v = randn(&[1, 8], 35);
    for per_axis in [false, true] {
        assert!(rotate_one(&v, [0; 4], 3, &rope_cfg(per_axis)).max_abs_diff(&v) < 1e-15);
    }
}

#[test]
fn rotation_matches_explicit_angles() {
    let v = randn(&[1, 8], 36);
    for &c in &[[1, 2, 0, 3], [-4, 0, 7, 1]] {
        let want = oracles::rotate(v.data(), &oracles::flattened_angles(c, 5, 8, 10_000.0));
        let got = rotate_one(&v, c, 5, &rope_cfg(false));
        assert!(oracles::max_abs_diff(&vec![want], &got) < 1e-12);
        let want = oracles::rotate(v.data(), &oracles::per_axis_angles(c, 8, 10_000.0));
        let got = rotate_one(&v, c, 5, &rope_cfg(true));
        assert!(oracles::max_abs_diff(&vec![want], &got) < 1e-12);
    }
}

#[test]
fn pairwise_scores_ignore_a_global_position_shift() {
    let base = Positions::for_grid(3, 3);
    let q = randn(&[81, 8], 37);
    let k = randn(&[81, 8], 38);
    for per_axis in [false, true] {
        let cfg = rope_cfg(per_axis);
        let moved = base.shifted([5, -3, 11, 2]);
        let s0 = rope_rotate(&q, &base, &cfg).unwrap().matmul(&rope_rotate(&k, &base, &cfg).unwrap().transpose().unwrap()).unwrap();
        let s1 = rope_rotate(&q, &moved, &cfg).unwrap().matmul(&rope_rotate(&k, &moved, &cfg).unwrap().transpose().unwrap()).unwrap();
        assert!(s0.max_abs_diff(&s1) < 1e-9);
    }
}

// The pooling scores w_q·R_j·Q_j pair each rotated query with a fixed
// vector, so a common extra rotation does move the pooled summaries.
#[test]
fn additive_pooling_sees_absolute_phase() {
    let base = Positions::for_grid(3, 3);
    let h = head(6, 8, 39);
    let x = randn(&[81, 6], 40);
    let cfg = rope_cfg(false);
    let t0 = RopeTable::new(&base, &cfg, 8).unwrap();
    let t1 = RopeTable::new(&base.shifted([1, 1, 1, 1]), &cfg, 8).unwrap();
    let a = additive(&x, &h, Some(&t0), 0.5);
    let b = additive(&x, &h, Some(&t1), 0.5);
    assert!(a.max_abs_diff(&b) > 1e-3);
}
