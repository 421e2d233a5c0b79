//! Property and oracle checks shared by the property tests and the
//! acceptance suite. Each returns a description of the first failure.

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use fads_icl::baselines::{icl_predict, kl_divergence, knn_prompt_predict, nearest, neighbor_vote, NeighborVoteConfig};
use fads_icl::extraction::{read_records, write_records, CacheMeta, FeatureCache, TokenId, TokenProb, VocabDistribution};
use fads_icl::modulators::{self, argmax, logistic, mlp, softmax, ModulatorKind};
use fads_icl::prompting::{render_prompt, ApproxTokenCounter, PromptPrefix};
use fads_icl::sampling::{sample_shots, split_train, ContextBudget, DemoRegime};
use fads_icl::LabeledExample;

pub type Check = std::result::Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn sorted(v: &[LabeledExample]) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = v.iter().map(|e| (e.text.clone(), e.label)).collect();
    out.sort();
    out
}

fn per_class(v: &[LabeledExample], classes: usize) -> Vec<usize> {
    let mut c = vec![0; classes];
    for e in v {
        c[e.label] += 1;
    }
    c
}

/// Sampling draws exactly `m` per class, and demonstrations plus residual
/// reproduce the shots as a multiset, with fixed regimes balanced per class
/// and the budgeted regime within budget and at most one apart per class.
pub fn split_invariants(cases: u32) -> Check {
    let strategy = (2usize..=5, 1usize..=12, 0usize..=6, 0usize..=4, any::<u64>(), 0usize..=400, any::<bool>());
    runner(cases)
        .run(&strategy, |(classes, m, d, extra, seed, budget, most)| {
            let ds = super::task(classes, m + extra, 1);
            let shots = sample_shots(&ds, m, seed).unwrap();
            prop_assert_eq!(per_class(&shots, classes), vec![m; classes]);
            let counter = ApproxTokenCounter;
            let cb = ContextBudget {
                max_tokens: budget,
                counter: &counter,
                template: &ds.template,
                verbalizer: &ds.verbalizer,
            };
            let split = if most {
                split_train(&shots, DemoRegime::Most, seed, Some(&cb)).unwrap()
            } else {
                let d = d.min(m / 2);
                let s = split_train(&shots, DemoRegime::Fixed(d), seed, None).unwrap();
                prop_assert_eq!(per_class(&s.demonstrations, classes), vec![d; classes]);
                prop_assert_eq!(per_class(&s.residual, classes), vec![m - d; classes]);
                s
            };
            let mut all = split.demonstrations.clone();
            all.extend(split.residual.iter().cloned());
            prop_assert_eq!(sorted(&all), sorted(&shots));
            if most {
                prop_assert!(cb.block_tokens(&split.demonstrations).unwrap() <= budget);
                let c = per_class(&split.demonstrations, classes);
                prop_assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1, "{:?}", c);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Rendering is a pure function, and every prompt of a run starts with the
/// same prefix bytes.
pub fn prompt_determinism(cases: u32) -> Check {
    let strategy = (2usize..=4, 0usize..=8, any::<u64>(), 0usize..40, 0usize..40);
    runner(cases)
        .run(&strategy, |(classes, n_demos, seed, q1, q2)| {
            let ds = super::task(classes, 10, 10);
            let shots = sample_shots(&ds, 10, seed).unwrap();
            let demos = &shots[..n_demos.min(shots.len())];
            let (a, b) = (&ds.test[q1 % ds.test.len()].text, &ds.test[q2 % ds.test.len()].text);
            let p1 = render_prompt(&ds.template, demos, &ds.verbalizer, a).unwrap();
            let again = render_prompt(&ds.template, demos, &ds.verbalizer, a).unwrap();
            prop_assert_eq!(&p1, &again);
            let p2 = render_prompt(&ds.template, demos, &ds.verbalizer, b).unwrap();
            let prefix = PromptPrefix::new(&ds.template, demos, &ds.verbalizer).unwrap();
            prop_assert_eq!(p1.prefix().as_bytes(), prefix.text().as_bytes());
            prop_assert_eq!(p1.prefix().as_bytes(), p2.prefix().as_bytes());
            prop_assert_eq!(&p1.text[p1.prefix_len..], ds.template.fill_query(a));
            prop_assert_eq!(p1.answer_cue_offset, p1.text.len());
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Every f32 bit pattern survives the binary format and a file round trip.
pub fn cache_round_trip(cases: u32) -> Check {
    let strategy = (1usize..=16, 0usize..=12).prop_flat_map(|(dim, n)| {
        proptest::collection::vec(("[a-f0-9]{1,64}", proptest::collection::vec(any::<u32>(), dim)), n)
            .prop_map(move |rows| (dim, rows))
    });
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let case = std::sync::atomic::AtomicUsize::new(0);
    runner(cases)
        .run(&strategy, |(dim, rows)| {
            let mut dedup: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            for (k, bits) in rows {
                dedup.insert(k, bits.into_iter().map(f32::from_bits).collect());
            }
            let mut buf = Vec::new();
            write_records(&mut buf, dim, dedup.iter().map(|(k, v)| (k.as_str(), v.as_slice()))).unwrap();
            let (d2, back) = read_records(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(d2, dim);
            prop_assert_eq!(back.len(), dedup.len());
            for ((k, v), (k2, v2)) in dedup.iter().zip(&back) {
                prop_assert_eq!(k, k2);
                let a: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = v2.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }

            let n = case.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            let path = dir.path().join(format!("c{n}.fadc"));
            let meta = CacheMeta {
                backend_id: "b".into(),
                kind_tag: "hidden".into(),
                ..Default::default()
            };
            let c = FeatureCache::open(&path, meta.clone()).unwrap();
            for (k, v) in &dedup {
                c.insert(k.clone(), v.clone()).unwrap();
            }
            c.flush().unwrap();
            let reopened = FeatureCache::open(&path, meta).unwrap();
            prop_assert_eq!(reopened.len(), dedup.len());
            for (k, v) in &dedup {
                let got = reopened.get(k).unwrap();
                prop_assert_eq!(
                    got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` against central differences.
fn gradient_error(theta: &[f64], f: impl Fn(&[f64]) -> (f64, Vec<f64>)) -> f64 {
    let (_, g) = f(theta);
    let mut t = theta.to_vec();
    let mut num = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        t[i] = theta[i] + FD_STEP;
        let up = f(&t).0;
        t[i] = theta[i] - FD_STEP;
        let down = f(&t).0;
        t[i] = theta[i];
        num[i] = (up - down) / (2.0 * FD_STEP);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = g.iter().zip(&num).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&g).max(norm(&num)).max(1e-12)
}

fn labelled_rows(n: usize, dim: usize, classes: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (
        proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, dim), n),
        proptest::collection::vec(0..classes, n),
    )
}

pub fn logistic_gradient(cases: u32) -> Check {
    let strategy = (2usize..=4, 1usize..=6, 2usize..=12).prop_flat_map(|(c, d, n)| {
        (
            labelled_rows(n, d, c),
            proptest::collection::vec(-1.0f64..1.0, c * d + c),
            0.0f64..2.0,
            Just(c),
        )
    });
    runner(cases)
        .run(&strategy, |((x, y), theta, l2, c)| {
            let err = gradient_error(&theta, |t| logistic::objective(t, &x, &y, c, l2));
            prop_assert!(err <= GRAD_TOLERANCE, "relative error {}", err);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn mlp_gradient(cases: u32) -> Check {
    let strategy = (2usize..=4, 1usize..=5, 1usize..=8, 2usize..=10, any::<u64>()).prop_flat_map(|(c, d, h, n, seed)| {
        (labelled_rows(n, d, c), 0.0f64..1.0, Just((c, d, h, seed)))
    });
    runner(cases)
        .run(&strategy, |((x, y), alpha, (c, d, h, seed))| {
            let shape = mlp::MlpShape {
                input: d,
                hidden: h,
                classes: c,
            };
            let theta = mlp::init(shape, seed);
            let err = gradient_error(&theta, |t| mlp::loss_and_grad(t, shape, &x, &y, alpha));
            prop_assert!(err <= GRAD_TOLERANCE, "relative error {}", err);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn dist(entries: &[(u64, f64)]) -> VocabDistribution {
    VocabDistribution::from_raw(entries.iter().map(|&(id, prob)| TokenProb {
        id: TokenId(id),
        token: format!("t{id}"),
        prob,
    }))
    .unwrap()
}

/// Straight summation over the union support after adding ε and
/// renormalizing.
pub fn kl_oracle(p: &[(u64, f64)], q: &[(u64, f64)]) -> f64 {
    let eps = fads_icl::baselines::KL_EPSILON;
    let norm = |v: &[(u64, f64)]| -> BTreeMap<u64, f64> {
        let z: f64 = v.iter().map(|e| e.1).sum();
        v.iter().map(|&(k, p)| (k, p / z)).collect()
    };
    let (pm, qm) = (norm(p), norm(q));
    let support: Vec<u64> = pm.keys().chain(qm.keys()).copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let n = support.len() as f64;
    let zp = pm.values().sum::<f64>() + n * eps;
    let zq = qm.values().sum::<f64>() + n * eps;
    let mut total = 0.0;
    for t in support {
        let a = (pm.get(&t).copied().unwrap_or(0.0) + eps) / zp;
        let b = (qm.get(&t).copied().unwrap_or(0.0) + eps) / zq;
        total += a * (a / b).ln();
    }
    total
}

/// Sparse, possibly truncated distributions with raw mass in (0, 1].
fn sparse_dist() -> impl Strategy<Value = Vec<(u64, f64)>> {
    (proptest::collection::btree_map(0u64..30, 0.001f64..1.0, 1..12), 0.05f64..=1.0).prop_map(|(m, mass)| {
        let z: f64 = m.values().sum();
        m.into_iter().map(|(k, v)| (k, v / z * mass)).collect()
    })
}

/// Worked examples and random pairs against the summation oracle.
pub fn kl_matches_oracle(cases: u32) -> Check {
    let half = [(0, 0.5), (1, 0.5)];
    let skew = [(0, 0.25), (1, 0.75)];
    let hand = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    let got = kl_divergence(&dist(&half), &dist(&skew));
    if (got - hand).abs() > 1e-9 {
        return Err(format!("KL example: {got} vs {hand}"));
    }
    for (p, q) in [(&half[..], &skew[..]), (&[(0, 1.0)][..], &[(1, 1.0)][..]), (&[(0, 0.2), (3, 0.8)][..], &skew[..])] {
        let (got, want) = (kl_divergence(&dist(p), &dist(q)), kl_oracle(p, q));
        if (got - want).abs() > 1e-9 * want.abs().max(1.0) {
            return Err(format!("KL {p:?} {q:?}: {got} vs oracle {want}"));
        }
    }
    runner(cases)
        .run(&(sparse_dist(), sparse_dist()), |(p, q)| {
            let got = kl_divergence(&dist(&p), &dist(&q));
            let want = kl_oracle(&p, &q);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", got, want);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// `D(p‖q) ≥ 0` with equality at `p = q`, for both directions and the
/// symmetric form.
pub fn gibbs_non_negativity(cases: u32) -> Check {
    let sym = NeighborVoteConfig {
        divergence: fads_icl::baselines::Divergence::SymmetricKl,
        ..Default::default()
    };
    runner(cases)
        .run(&(sparse_dist(), sparse_dist()), |(p, q)| {
            let (p, q) = (dist(&p), dist(&q));
            prop_assert!(kl_divergence(&p, &q) >= 0.0);
            prop_assert!(kl_divergence(&q, &p) >= 0.0);
            prop_assert!(sym.distance(&p, &q) >= 0.0);
            prop_assert!(kl_divergence(&p, &p).abs() < 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn sums_to_one(p: &[f64]) -> bool {
    (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && p.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v))
}

/// Softmax, renormalized distributions, baseline outputs and every
/// modulator's `predict_proba` sum to 1 within 1e-9.
pub fn probabilities_sum_to_one(cases: u32) -> Check {
    runner(cases)
        .run(&proptest::collection::vec(-800.0f64..800.0, 1..60), |logits| {
            prop_assert!(sums_to_one(&softmax(&logits)));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    runner(cases)
        .run(&(sparse_dist(), sparse_dist(), sparse_dist(), 0.0f64..=1.0), |(a, b, c, lambda)| {
            let (a, b, c) = (dist(&a), dist(&b), dist(&c));
            for d in [&a, &b, &c] {
                prop_assert!(sums_to_one(&d.entries().iter().map(|e| e.prob).collect::<Vec<_>>()));
            }
            let labels: Vec<TokenId> = a.entries().iter().take(2).map(|e| e.id).collect();
            if labels.len() == 2 {
                prop_assert!(sums_to_one(&icl_predict(&a, &labels).unwrap()));
                let cfg = NeighborVoteConfig {
                    k: fads_icl::NeighborK::Fixed(1),
                    ..Default::default()
                };
                let p = knn_prompt_predict(&a, &[b.clone(), c.clone()], &[0, 1], &labels, lambda, &cfg).unwrap();
                prop_assert!(sums_to_one(&p));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let kinds = ["lr", "svm", "mlp", "knn", "tree"];
    let strategy = (2usize..=4, 1usize..=4, 6usize..=24, any::<u64>())
        .prop_flat_map(|(c, d, n, s)| (labelled_rows(n, d, c), proptest::collection::vec(-3.0f64..3.0, d), Just((c, s))));
    runner(cases.min(40))
        .run(&strategy, |((x, mut y), probe, (c, seed))| {
            y[0] = 0;
            y[1] = 1;
            for k in kinds {
                let kind: ModulatorKind = k.parse().unwrap();
                let m = modulators::fit(&kind, &x, &y, c, seed).unwrap();
                for row in x.iter().take(3).chain(std::iter::once(&probe)) {
                    let p = m.predict_proba(row).unwrap();
                    prop_assert_eq!(p.len(), c);
                    prop_assert!(sums_to_one(&p), "{} gave {:?}", k, p);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// The kNN modulator against a scan that repeatedly takes the first
/// strictly smallest remaining distance.
pub fn knn_matches_exhaustive_scan(cases: u32) -> Check {
    let strategy = (2usize..=200, 1usize..=4, 2usize..=4, 1usize..=9).prop_flat_map(|(n, d, c, k)| {
        (
            proptest::collection::vec(proptest::collection::vec((-4i32..=4).prop_map(|v| v as f64 / 2.0), d), n),
            proptest::collection::vec(0..c, n),
            proptest::collection::vec(proptest::collection::vec((-8i32..=8).prop_map(|v| v as f64 / 4.0), d), 5),
            Just((c, k)),
        )
    });
    runner(cases)
        .run(&strategy, |(x, mut y, probes, (c, k))| {
            y[0] = 0;
            y[1] = 1;
            let kind = ModulatorKind::NearestNeighbors(modulators::KnnParams { k });
            let m = modulators::fit(&kind, &x, &y, c, 0).unwrap();
            for q in &probes {
                let dists: Vec<f64> = x
                    .iter()
                    .map(|p| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                let mut taken = vec![false; x.len()];
                let mut votes = vec![0.0; c];
                let kk = k.min(x.len());
                for _ in 0..kk {
                    let mut best: Option<usize> = None;
                    for i in 0..x.len() {
                        if !taken[i] && best.is_none_or(|b| dists[i] < dists[b]) {
                            best = Some(i);
                        }
                    }
                    let b = best.unwrap();
                    taken[b] = true;
                    votes[y[b]] += 1.0;
                }
                let want: Vec<f64> = votes.iter().map(|v| v / kk as f64).collect();
                prop_assert_eq!(m.predict_proba(q).unwrap(), want);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// One worked example per tie rule.
pub fn tie_rules() -> Check {
    ensure!(argmax(&[0.3, 0.3, 0.1]) == 0, "argmax tie should pick the smaller label");
    ensure!(
        nearest(&[0.2, 0.1, 0.1, 0.2], 3) == vec![(1, 0.1), (2, 0.1), (0, 0.2)],
        "equal distances should keep index order"
    );
    ensure!(
        neighbor_vote(&[0.5, 0.2], &[0, 1], 2, 2).unwrap() == 1,
        "equal vote counts should go to the smaller summed distance"
    );
    ensure!(
        neighbor_vote(&[0.2, 0.2], &[1, 0], 2, 2).unwrap() == 0,
        "equal counts and sums should go to the smaller label"
    );
    let knn = ModulatorKind::NearestNeighbors(modulators::KnnParams { k: 1 });
    let m = modulators::fit(&knn, &[vec![1.0], vec![-1.0]], &[1, 0], 2, 0).map_err(|e| e.to_string())?;
    ensure!(m.predict(&[0.0]).unwrap() == 1, "kNN modulator ties should go to the earlier point");
    let tree = ModulatorKind::DecisionTree(Default::default());
    let x = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
    let m = modulators::fit(&tree, &x, &[0, 1], 2, 0).map_err(|e| e.to_string())?;
    match &m {
        modulators::FittedModulator::Tree(t) => match &t.nodes[0] {
            modulators::tree::TreeNode::Split { feature, threshold, .. } => {
                ensure!(*feature == 0 && *threshold == 0.5, "tree should split feature 0 at 0.5, got {feature} {threshold}");
            }
            other => return Err(format!("tree root should split, got {other:?}")),
        },
        _ => unreachable!(),
    }
    let proba_tie = modulators::fit(&knn, &[vec![0.0], vec![0.0]], &[1, 0], 2, 0).map_err(|e| e.to_string())?;
    ensure!(proba_tie.predict(&[0.0]).unwrap() == 1, "coincident points should resolve by training order");
    let k2 = ModulatorKind::NearestNeighbors(modulators::KnnParams { k: 2 });
    let even = modulators::fit(&k2, &[vec![0.0], vec![1.0]], &[1, 0], 2, 0).map_err(|e| e.to_string())?;
    ensure!(even.predict(&[0.5]).unwrap() == 0, "an even class split should predict the smaller label");
    Ok(())
}
