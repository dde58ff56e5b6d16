#![allow(dead_code)]

use duplex_latent::numerics::{Tape, Tensor, Var};

/// Central finite-difference oracle. `build` maps leaf variables to a scalar
/// loss on a fresh tape; returns the worst relative error over the checked
/// coordinates, where relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn fd_check<F>(inputs: &[Tensor], build: F, h: f32, floor: f32, max_coords: usize) -> f32
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor]| -> f32 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.input(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let mut worst = 0.0f32;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        let stride = (t.len() / max_coords.max(1)).max(1);
        for idx in (0..t.len()).step_by(stride) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Deterministic pseudo-random tensor without pulling an RNG into tests.
pub fn lcg_tensor(shape: &[usize], seed: u64, scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((s >> 33) as f64 / (1u64 << 31) as f64) as f32;
            (u * 2.0 - 1.0) * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub mod oracle {
    //! Straightforward f64 reimplementations of the loss terms.

    fn lse(row: &[f64]) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    pub fn softmax(row: &[f64]) -> Vec<f64> {
        let l = lse(row);
        row.iter().map(|x| (x - l).exp()).collect()
    }

    fn scale(label: usize, bos: f64, eos: f64) -> f64 {
        match label {
            1 => bos,
            2 => eos,
            _ => 1.0,
        }
    }

    /// `Σ G·w·(−log softmax) / Σ G·w`, `w` = 20 at `<BOS>`, 10 at `<EOS>`.
    pub fn reco(logits: &[Vec<f64>], labels: &[usize], g: &[u8], bos: f64, eos: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for ((row, &l), &gt) in logits.iter().zip(labels).zip(g) {
            if gt == 1 {
                let w = scale(l, bos, eos);
                num += w * (lse(row) - row[l]);
                den += w;
            }
        }
        num / den
    }

    /// Unmasked variant used by the pretraining objective.
    pub fn ce_all(logits: &[Vec<f64>], labels: &[usize], bos: f64, eos: f64) -> f64 {
        reco(logits, labels, &vec![1; labels.len()], bos, eos)
    }

    pub fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &b)| a * (a.ln() - b.max(1e-9).ln()))
            .sum()
    }

    pub fn regu(expert: &[Vec<f64>], logits: &[Vec<f64>], g: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for ((p, y), &gt) in expert.iter().zip(logits).zip(g) {
            if gt == 0 {
                num += kl(p, &softmax(y));
                den += 1.0;
            }
        }
        num / den
    }

    pub fn time(g_hat: &[f64], g: &[u8]) -> f64 {
        let eps = 1e-7;
        g_hat
            .iter()
            .zip(g)
            .map(|(&p, &t)| {
                let c = p.clamp(eps, 1.0 - eps);
                if t == 1 {
                    -c.ln()
                } else {
                    -(1.0 - c).ln()
                }
            })
            .sum::<f64>()
            / g.len() as f64
    }
}

pub mod fixtures {
    use duplex_latent::model::{Model, ModelConfig};
    use duplex_latent::schema::{AudioToken, DuplexRecord, Events, QuerySpan, Task, TextToken, TurnSpan};

    /// Eight frames, text ids below 6: "sum 1 0" answered with `d1`.
    pub fn tiny_record() -> DuplexRecord {
        let u = AudioToken::USIL;
        DuplexRecord {
            user: vec![
                AudioToken::marker(Task::Sum),
                AudioToken::digit(1),
                AudioToken::digit(0),
                AudioToken::Q_END,
                u,
                u,
                u,
                u,
            ],
            agent: vec![
                TextToken::SIL,
                TextToken::SIL,
                TextToken::SIL,
                TextToken::SIL,
                TextToken::BOS,
                TextToken::digit(1),
                TextToken::EOS,
                TextToken::SIL,
            ],
            g: vec![0, 0, 0, 0, 1, 1, 1, 0],
            events: Events {
                queries: vec![QuerySpan {
                    start: 0,
                    end: 3,
                    task: Task::Sum,
                }],
                answers: vec![vec![TextToken::digit(1)]],
                turns: vec![TurnSpan {
                    bos: 4,
                    eos: 6,
                    interrupted_at: None,
                }],
                interruption_onset: None,
            },
            task: "sum".into(),
            seed: 0,
            snr_db: None,
        }
    }

    /// `d = 4`, `|V| = 6`, one layer everywhere.
    pub fn tiny_model(seed: u64) -> Model {
        Model::new(ModelConfig {
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            enc_layers: 1,
            expert_layers: 1,
            text_vocab: 6,
            ffn_mult: 2,
            max_frames: 64,
            init_seed: seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }
}

pub mod metric_fixtures {
    use duplex_latent::engine::{Anomaly, EventTrace, TraceFrame};
    use duplex_latent::model::Phase;
    use duplex_latent::schema::{g_labels, AudioToken, DuplexRecord, Events, QuerySpan, TextToken, TurnSpan};
    use serde_json::Value;

    pub struct Case {
        pub name: String,
        pub record: DuplexRecord,
        pub trace: EventTrace,
        pub expect: Value,
    }

    fn expand(row: &str) -> Vec<String> {
        let mut out = Vec::new();
        for tok in row.split_whitespace() {
            let (t, n) = match tok.split_once('*') {
                Some((t, n)) => (t, n.parse::<usize>().unwrap()),
                None => (tok, 1),
            };
            out.extend(std::iter::repeat_n(t.to_string(), n));
        }
        out
    }

    fn text(t: &str) -> TextToken {
        match t {
            "_" => TextToken::SIL,
            "B" => TextToken::BOS,
            "E" => TextToken::EOS,
            "P" => TextToken::PAD,
            other => TextToken::parse(other).unwrap(),
        }
    }

    fn audio(t: &str) -> AudioToken {
        if t == "_" {
            AudioToken::USIL
        } else {
            AudioToken::parse(t).unwrap()
        }
    }

    fn texts(v: &Value) -> Vec<TextToken> {
        v.as_array().unwrap().iter().map(|t| text(t.as_str().unwrap())).collect()
    }

    fn case(c: &Value) -> Case {
        let name = c["name"].as_str().unwrap().to_string();
        let user: Vec<AudioToken> = expand(c["user"].as_str().unwrap()).iter().map(|t| audio(t)).collect();
        let agent: Vec<TextToken> = expand(c["agent"].as_str().unwrap()).iter().map(|t| text(t)).collect();
        let out: Vec<TextToken> = expand(c["out"].as_str().unwrap()).iter().map(|t| text(t)).collect();
        assert_eq!(user.len(), agent.len(), "{name}: user vs agent rows");
        assert_eq!(user.len(), out.len(), "{name}: user vs out rows");
        let queries = c["queries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|q| {
                serde_json::from_value::<QuerySpan>(serde_json::json!({"start": q[0], "end": q[1], "task": q[2]}))
                    .unwrap()
            })
            .collect();
        let turns = c["turns"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| TurnSpan {
                bos: t[0].as_u64().unwrap() as usize,
                eos: t[1].as_u64().unwrap() as usize,
                interrupted_at: t[2].as_u64().map(|x| x as usize),
            })
            .collect::<Vec<_>>();
        let onset = turns.iter().find_map(|t| t.interrupted_at);
        let record = DuplexRecord {
            g: g_labels(&agent).unwrap(),
            user: user.clone(),
            agent,
            events: Events {
                queries,
                answers: c["answers"].as_array().unwrap().iter().map(texts).collect(),
                turns,
                interruption_onset: onset,
            },
            task: c["task"].as_str().unwrap().to_string(),
            seed: 0,
            snr_db: None,
        };
        let anomalies = &c["trace_anomalies"];
        let frames = out
            .iter()
            .enumerate()
            .map(|(t, &a)| TraceFrame {
                t,
                user: user[t],
                agent: a,
                g: if a == TextToken::SIL { 0.1 } else { 0.9 },
                phase: if a == TextToken::SIL { Phase::Listening } else { Phase::Speaking },
                anomaly: anomalies.get(t.to_string()).map(|v| match v.as_str().unwrap() {
                    "control_while_listening" => Anomaly::ControlWhileListening,
                    "content_without_bos" => Anomaly::ContentWithoutBos,
                    other => panic!("unknown anomaly {other}"),
                }),
            })
            .collect();
        Case {
            name,
            record,
            trace: EventTrace { frames },
            expect: c["expect"].clone(),
        }
    }

    /// The shipped fixtures and the expected aggregate report.
    pub fn load() -> (Vec<Case>, Value) {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/metrics.json");
        let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        let cases = v["cases"].as_array().unwrap().iter().map(case).collect();
        (cases, v["aggregate"].clone())
    }

    fn surfaces(v: &[TextToken]) -> Value {
        Value::from(v.iter().map(|t| t.surface()).collect::<Vec<_>>())
    }

    /// Mismatches between the metric functions and the hand-computed values.
    pub fn check(c: &Case) -> Vec<String> {
        use duplex_latent::evalsuite::{barge_in, response_accuracy, turn_taking, BARGE_IN_WINDOW, RESPONSE_WINDOW};
        let mut bad = Vec::new();
        let mut expect_eq = |what: &str, got: Value, want: &Value| {
            if &got != want {
                bad.push(format!("{}: {what} = {got}, expected {want}", c.name));
            }
        };
        let e = &c.expect;
        let acc = response_accuracy(&c.trace, &c.record).unwrap();
        let extracted: Vec<Value> = acc
            .rounds
            .iter()
            .map(|r| r.extracted.as_deref().map_or(Value::Null, surfaces))
            .collect();
        expect_eq("extracted", Value::from(extracted), &e["extracted"]);
        expect_eq("correct", acc.rounds.iter().map(|r| r.correct).collect::<Vec<_>>().into(), &e["correct"]);
        expect_eq("scored", acc.rounds.iter().map(|r| r.scored).collect::<Vec<_>>().into(), &e["scored"]);
        expect_eq("dialogue_correct", acc.correct.into(), &e["dialogue_correct"]);
        let tt = turn_taking(&c.trace, &c.record, RESPONSE_WINDOW).unwrap();
        let lat: Vec<Value> = tt.rounds.iter().map(|r| r.latency.map_or(Value::Null, Value::from)).collect();
        expect_eq("latency", lat.into(), &e["latency"]);
        expect_eq("taken", tt.rounds.iter().map(|r| r.taken).collect::<Vec<_>>().into(), &e["taken"]);
        let mut anomalies = acc.anomalies.clone();
        anomalies.extend(tt.anomalies.clone());
        expect_eq("anomalies", anomalies.into(), &e["anomalies"]);
        let barge = match barge_in(&c.trace, &c.record, BARGE_IN_WINDOW) {
            Ok(v) => Value::from(
                v.iter()
                    .map(|b| {
                        serde_json::json!([b.onset, b.eos, b.latency, b.success])
                    })
                    .collect::<Vec<_>>(),
            ),
            Err(_) => Value::Null,
        };
        expect_eq("barge", barge, &e["barge"]);
        bad
    }
}

pub mod grad_cases {
    //! Every differentiable tape operation as a scalar-valued probe.

    use std::rc::Rc;

    use super::lcg_tensor;
    use duplex_latent::numerics::{AttnSpec, Packing, Tape, Tensor, Var};

    pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

    pub struct Case {
        pub name: &'static str,
        pub inputs: Vec<Tensor>,
        pub build: Build,
    }

    fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Case {
        Case {
            name,
            inputs,
            build: Box::new(build),
        }
    }

    /// Projects a tensor-valued node to a scalar with fixed random weights.
    pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
        let shape = tape.value(out).shape().to_vec();
        let r = tape.constant(lcg_tensor(&shape, seed ^ 0xabcdef, 1.0));
        let m = tape.mul(out, r).unwrap();
        tape.sum(m)
    }

    pub fn all(seed: u64) -> Vec<Case> {
        let x = lcg_tensor(&[5, 6], seed, 1.0);
        let w = lcg_tensor(&[6, 4], seed + 100, 0.5);
        let b = lcg_tensor(&[4], seed + 200, 0.5);
        let x2 = lcg_tensor(&[5, 6], seed + 300, 1.0);
        let packing = Rc::new(Packing::new(&[3, 4]));
        let attn_packing = Rc::new(Packing::new(&[5, 3, 6]));
        let labels = [0usize, 4, 2, 2, 1, 3];
        let weights = [1.0f32, 0.0, 20.0, 1.0, 10.0, 1.0];
        let logits = lcg_tensor(&[6, 5], seed, 2.0);
        let targets: Vec<f32> = (0..9).map(|i| ((i + seed as usize) % 2) as f32).collect();

        let mut cases = vec![
            case("linear", vec![x.clone(), w.clone(), b], move |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
                project(t, y, seed)
            }),
            case("matmul", vec![x.clone(), w], move |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                project(t, y, seed)
            }),
            case("add/mul/scale", vec![x, x2], move |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let m = t.mul(a, v[1]).unwrap();
                let s = t.scale(m, 0.7);
                project(t, s, seed)
            }),
            case("gelu/sigmoid", vec![lcg_tensor(&[4, 5], seed, 3.0)], move |t, v| {
                let g = t.gelu(v[0]);
                let s = t.sigmoid(g);
                project(t, s, seed)
            }),
            case("softmax_rows", vec![lcg_tensor(&[3, 7], seed, 2.0)], move |t, v| {
                let s = t.softmax_rows(v[0]);
                project(t, s, seed)
            }),
            case("mean", vec![lcg_tensor(&[3, 7], seed, 2.0)], |t, v| {
                let sq = t.mul(v[0], v[0]).unwrap();
                t.mean(sq)
            }),
            case("gather", vec![lcg_tensor(&[7, 4], seed, 1.0)], move |t, v| {
                let g = t.gather(v[0], &[3, 0, 3, 6, 1]).unwrap();
                project(t, g, seed)
            }),
            case(
                "blend_rows",
                vec![lcg_tensor(&[4, 3], seed, 1.0), lcg_tensor(&[4, 3], seed + 9, 1.0)],
                move |t, v| {
                    let r = t.blend_rows(v[0], v[1], &[true, false, false, true]).unwrap();
                    project(t, r, seed)
                },
            ),
            case(
                "rms_norm",
                vec![lcg_tensor(&[5, 8], seed, 2.0), lcg_tensor(&[8], seed + 1, 1.0)],
                move |t, v| {
                    let n = t.rms_norm(v[0], v[1]).unwrap();
                    project(t, n, seed)
                },
            ),
            case("rope", vec![lcg_tensor(&[7, 8], seed, 1.0)], move |t, v| {
                let r = t.rope(v[0], &packing, 2).unwrap();
                project(t, r, seed)
            }),
            case("cross_entropy", vec![logits.clone()], move |t, v| {
                t.weighted_cross_entropy(v[0], &labels, &weights).unwrap()
            }),
            case("kl_rows", vec![lcg_tensor(&[6, 5], seed + 5, 1.5), logits.clone()], |t, v| {
                let p = t.softmax_rows(v[0]);
                t.kl_rows(p, v[1], &[1.0, 1.0, 0.0, 1.0, 0.5, 1.0]).unwrap()
            }),
            case("bce", vec![lcg_tensor(&[9], seed + 7, 2.0)], move |t, v| {
                let p = t.sigmoid(v[0]);
                t.binary_cross_entropy(p, &targets).unwrap()
            }),
            case("lin_comb", vec![logits, lcg_tensor(&[9], seed, 1.0)], move |t, v| {
                let a = t.weighted_cross_entropy(v[0], &labels, &weights).unwrap();
                let sq = t.mul(v[1], v[1]).unwrap();
                let b = t.sum(sq);
                t.lin_comb(&[(a, 1.0), (b, 3.0)]).unwrap()
            }),
        ];
        let specs = [
            AttnSpec { heads: 2, causal: true, window: 0 },
            AttnSpec { heads: 2, causal: true, window: 2 },
            AttnSpec { heads: 1, causal: false, window: 0 },
        ];
        for spec in specs {
            let p = attn_packing.clone();
            let qkv = vec![
                lcg_tensor(&[14, 8], seed, 1.0),
                lcg_tensor(&[14, 8], seed + 1, 1.0),
                lcg_tensor(&[14, 8], seed + 2, 1.0),
            ];
            cases.push(case("attention", qkv, move |t, v| {
                let o = t.attention(v[0], v[1], v[2], &p, spec).unwrap();
                project(t, o, seed)
            }));
        }
        cases
    }
}
