use proptest::prelude::*;

use privdfs::at::loss_ar;
use privdfs::attack::{fit_ridge, normal_equations, PairSet};
use privdfs::config::RunConfig;
use privdfs::data::{synth_generate, threat_split, Dataset, SynthSpec, Style, ThreatLevel};
use privdfs::dfs::stages::{chan_perm, cross_mix, inverse_perm, inverse_shifts, patch_reorg};
use privdfs::dfs::{dfs_forward, make_policy, DfsConfig, DfsPolicy};
use privdfs::linalg::Mat;
use privdfs::metrics::{psnr, ssim, PSNR_CAP_DB};
use privdfs::model::{ArchConfig, ModelBundle};
use privdfs::rng::SplitMix64;
use privdfs::transport::wire::{decode_message, encode_message, Message, DEFAULT_MAX_VALUES};
use privdfs::transport::{Endpoint, Simulator};
use privdfs::FeatureMap;

fn random_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
    let mut rng = SplitMix64::new(seed);
    FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gaussian()).collect()).unwrap()
}

fn unit_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
    let mut rng = SplitMix64::new(seed);
    FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.uniform()).collect()).unwrap()
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// (N, channels, height, width, patch) with every divisibility constraint met.
fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (1usize..=4, 1usize..=3, 1usize..=3, 1usize..=3, 1usize..=3)
        .prop_map(|(n, per, gh, gw, p)| (n, n * per, gh * p, gw * p, p))
}

fn cfg_for(n: usize, p: usize, sigma: f64) -> DfsConfig {
    let mix_alpha = if n == 1 { 0.0 } else { 0.25 };
    DfsConfig { num_branches: n, patch_size: p, noise_scale: sigma, mix_alpha, ..DfsConfig::default() }
}

// Independent of the library: population statistics, one window per channel.
fn global_ssim_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    let cxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn policy_is_deterministic_and_orthogonal(key in any::<u64>(), (n, c, h, w, p) in geometry()) {
        let cfg = cfg_for(n, p, 0.3);
        let a = make_policy(key, &cfg, (c, h, w)).unwrap();
        let b = make_policy(key, &cfg, (c, h, w)).unwrap();
        prop_assert_eq!(&a, &b);
        let q = a.ortho_mat();
        let qtq = q.transpose().matmul(&q).unwrap();
        prop_assert!(qtq.max_abs_diff(&Mat::identity(c)) < 1e-6);
        prop_assert!((q.determinant().unwrap().abs() - 1.0).abs() < 1e-5);
        a.validate().unwrap();
    }

    #[test]
    fn chan_perm_is_a_bijection(key in any::<u64>(), (n, c, h, w, p) in geometry(), seed in any::<u64>()) {
        let policy = make_policy(key, &cfg_for(n, p, 0.3), (c, h, w)).unwrap();
        let s = random_map(seed, c / n, h, w);
        for perm in &policy.chan_perms {
            let out = chan_perm(&s, perm).unwrap();
            prop_assert_eq!(sorted(out.data()), sorted(s.data()));
            prop_assert_eq!(chan_perm(&out, &inverse_perm(perm)).unwrap(), s.clone());
        }
    }

    #[test]
    fn patch_reorg_is_a_bijection(key in any::<u64>(), (n, c, h, w, p) in geometry(), seed in any::<u64>()) {
        let policy = make_policy(key, &cfg_for(n, p, 0.3), (c, h, w)).unwrap();
        let (gh, gw) = policy.grid();
        let s = random_map(seed, c / n, h, w);
        for shifts in &policy.patch_shifts {
            let out = patch_reorg(&s, shifts, p).unwrap();
            for ch in 0..s.channels() {
                prop_assert_eq!(sorted(out.channel(ch)), sorted(s.channel(ch)));
            }
            prop_assert_eq!(patch_reorg(&out, &inverse_shifts(shifts, gh, gw), p).unwrap(), s.clone());
        }
    }

    #[test]
    fn cross_mix_is_invertible(n in 1usize..=5, alpha in 0.0f64..0.45, seed in any::<u64>()) {
        let mut shares: Vec<FeatureMap> = (0..n).map(|b| random_map(seed ^ b as u64, 2, 3, 3)).collect();
        let alpha = if n == 1 { 0.0 } else { alpha };
        let cfg = DfsConfig { num_branches: n, mix_alpha: alpha, patch_size: 1, ..DfsConfig::default() };
        let policy = make_policy(1, &cfg, (2 * n, 3, 3)).unwrap();
        let mixed = cross_mix(&shares, &policy.mix).unwrap();
        let inv = policy.mix_mat().inverse().unwrap();
        let back = cross_mix(&mixed, inv.data()).unwrap();
        for (a, b) in back.iter().zip(shares.iter_mut()) {
            let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-9, "max error {}", err);
        }
    }

    #[test]
    fn shares_are_deterministic_finite_and_balanced(
        key in any::<u64>(),
        (n, c, h, w, p) in geometry(),
        seed in any::<u64>(),
        nonce in any::<u64>(),
    ) {
        let cfg = cfg_for(n, p, 0.3);
        let policy = make_policy(key, &cfg, (c, h, w)).unwrap();
        let z = random_map(seed, c, h, w);
        let (a, _) = dfs_forward(&z, &policy, &cfg, None, nonce).unwrap();
        let (b, _) = dfs_forward(&z, &policy, &cfg, None, nonce).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n);
        for (i, s) in a.iter().enumerate() {
            prop_assert_eq!(s.branch_id, i);
            prop_assert_eq!(s.features.shape(), (c / n, h, w));
            prop_assert!(s.features.is_finite());
        }
    }

    #[test]
    fn identity_policy_without_noise_collapses_to_split(
        (n, c, h, w, p) in geometry(),
        seed in any::<u64>(),
        nonce in any::<u64>(),
    ) {
        let cfg = cfg_for(n, p, 0.0);
        let policy = DfsPolicy::identity(c, h, w, &cfg).unwrap();
        let z = random_map(seed, c, h, w);
        let (shares, _) = dfs_forward(&z, &policy, &cfg, None, nonce).unwrap();
        let relu = z.map(|v| v.max(0.0));
        let cb = c / n;
        for (b, s) in shares.iter().enumerate() {
            prop_assert_eq!(&s.features, &relu.slice_channels(b * cb, (b + 1) * cb).unwrap());
        }
    }

    #[test]
    fn ridge_satisfies_normal_equations(seed in any::<u64>(), n in 4usize..40, d in 1usize..6) {
        let mut rng = SplitMix64::new(seed);
        let pairs = PairSet {
            inputs: (0..n).map(|_| (0..d).map(|_| rng.gaussian()).collect()).collect(),
            images: (0..n).map(|i| unit_map(seed.wrapping_add(i as u64), 1, 2, 2)).collect(),
        };
        let inv = fit_ridge(&pairs, Some(0.1)).unwrap();
        let (gram, atb) = normal_equations(&pairs).unwrap();
        let mut reg = gram;
        for i in 0..reg.rows() {
            reg[(i, i)] += 0.1;
        }
        let lhs = reg.matmul(inv.linear_weights().unwrap()).unwrap();
        let scale = atb.max_abs().max(1.0);
        prop_assert!(lhs.max_abs_diff(&atb) / scale < 1e-9);
    }

    #[test]
    fn loss_ar_matches_handwritten_average(seed in any::<u64>(), c in 1usize..=3) {
        let x = unit_map(seed, c, 4, 4);
        let recons: Vec<FeatureMap> = (1..=3).map(|i| unit_map(seed.wrapping_add(i), c, 4, 4)).collect();
        let mut expected = 0.0;
        for r in &recons {
            let s: f64 = (0..c).map(|ch| global_ssim_oracle(x.channel(ch), r.channel(ch))).sum::<f64>() / c as f64;
            let m: f64 = x.data().iter().zip(r.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
            expected += s - m;
        }
        expected /= 3.0;
        let got = loss_ar(&x, &recons).unwrap();
        prop_assert!((got - expected).abs() < 1e-6, "{} vs {}", got, expected);
    }

    #[test]
    fn identical_images_score_perfectly(seed in any::<u64>(), c in 1usize..=3, h in 1usize..20, w in 1usize..20) {
        let x = unit_map(seed, c, h, w);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn ssim_falls_as_noise_grows(seed in any::<u64>()) {
        let x = synth_generate(&SynthSpec { size: 16, style: Style::Base, seed }, 1)[0].image.clone();
        let mut last = 1.0;
        for sigma in [0.05, 0.1, 0.2, 0.4] {
            let mut rng = SplitMix64::new(seed ^ 0x5a5a);
            let noisy = x.data().iter().map(|v| v + sigma * rng.gaussian()).collect();
            let y = FeatureMap::from_vec(1, 16, 16, noisy).unwrap();
            let s = ssim(&x, &y).unwrap();
            prop_assert!(s < last, "sigma {} gave {} after {}", sigma, s, last);
            last = s;
        }
    }

    #[test]
    fn synthetic_pixels_are_in_range(seed in any::<u64>(), shifted in any::<bool>()) {
        let style = if shifted { Style::Shifted } else { Style::Base };
        for s in synth_generate(&SynthSpec { size: 16, style, seed }, 20) {
            prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.label < 10);
        }
    }

    #[test]
    fn threat_splits_never_touch_the_eval_pool(seed in any::<u64>(), level in 1u8..=3, budget in 1usize..60) {
        let data = Dataset::synthetic(SynthSpec { seed, ..SynthSpec::default() }, 80, 20);
        let level = ThreatLevel::try_from(level).unwrap();
        let split = threat_split(&data, level, budget, seed).unwrap();
        prop_assert_eq!(&split.eval, &data.test);
        for a in &split.attacker {
            prop_assert!(!data.test.iter().any(|t| t.image == a.image));
        }
        if level == ThreatLevel::InDistribution {
            prop_assert_eq!(split.attacker.len(), budget);
            prop_assert!(split.attacker.iter().all(|a| data.train.contains(a)));
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected(
        section in prop::sample::select(vec!["arch", "dfs", "train", "at", "data", "threat", "cluster", "attack", "probe"]),
        name in "[a-z]{3,10}_x",
    ) {
        let doc = format!(r#"{{"{section}": {{"{name}": 1}}}}"#);
        prop_assert!(RunConfig::from_json(&doc).is_err());
        let top = format!(r#"{{"{name}": 1}}"#);
        prop_assert!(RunConfig::from_json(&top).is_err());
    }

    #[test]
    fn wire_messages_round_trip(
        request_id in any::<u64>(),
        policy_id in any::<u32>(),
        branch_id in any::<u8>(),
        values in prop::collection::vec(-1e6f32..1e6, 1..48),
        text in ".{0,40}",
        code in 1u16..=9,
    ) {
        let len = values.len();
        let tensor = FeatureMap::from_f32(1, 1, len, &values).unwrap();
        let msgs = [
            Message::Hello { server_id: request_id, branch_id },
            Message::InferReq { request_id, policy_id, branch_id, tensor },
            Message::InferResp { request_id, embedding: values.clone() },
            Message::Err { code, message: text },
        ];
        for m in msgs {
            prop_assert_eq!(decode_message(&encode_message(&m), DEFAULT_MAX_VALUES).unwrap(), m);
        }
    }

    #[test]
    fn arbitrary_bytes_decode_or_fail_with_a_code(bytes in prop::collection::vec(any::<u8>(), 0..64), keep_header in any::<bool>()) {
        let mut frame = bytes;
        if keep_header && frame.len() >= 6 {
            frame[..6].copy_from_slice(b"PDFS\x01\x02");
        }
        if let Err(e) = decode_message(&frame, DEFAULT_MAX_VALUES) {
            prop_assert!((1..=9).contains(&e.code()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn each_server_sees_only_its_own_share(key in any::<u64>(), nonce in any::<u64>(), seed in any::<u64>()) {
        let bundle = ModelBundle::new(ArchConfig::default(), DfsConfig::default(), vec![key], 0).unwrap();
        let family = bundle.family().unwrap();
        let (c, _, _) = bundle.arch.encoder_shape();
        let n = bundle.num_branches();
        let x = synth_generate(&SynthSpec { seed, ..SynthSpec::default() }, 1)[0].image.clone();
        let sim = Simulator::new(&bundle);
        sim.infer(&x, family.policy(0), nonce).unwrap();
        let ledger = sim.ledger();
        prop_assert_eq!(sim.server_to_server(), 0);
        for b in 0..n {
            let to_b: Vec<_> = ledger.iter().filter(|e| e.to == Endpoint::Server(b)).collect();
            prop_assert_eq!(to_b.len(), 1);
            prop_assert!(to_b[0].channels <= c / n);
        }
    }
}
