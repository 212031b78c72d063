//! Synthetic monolithic graph generator.
//!
//! Emits an unrolled export in the shape this toolkit is built to take
//! apart: an encoder chain feeding `n_copies` weight-sharing core blocks
//! that are chained through baked solver arithmetic (Mul/Add of the
//! first-order update with per-copy constant coefficients), each copy fed
//! its own constant timestep, plus a small linear head on the last
//! prediction. Deterministic per seed; payloads are f32-quantized exactly
//! as a store/load cycle would leave them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::schedule::{TimestepGrid, VpSchedule};

use super::model::{DType, Graph, InputDecl, Node, OpSpec, Payload, TensorMeta};
use super::GraphError;

/// Smallest core block: x/c/t projections, two adds, layer norm,
/// activation, output projection.
pub const MIN_CORE_SIZE: usize = 8;
/// Smallest non-empty encoder: input projection plus final layer norm.
pub const MIN_ENCODER_SIZE: usize = 2;

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_copies: usize,
    /// Encoder node count; 0 means the copies read the context embedding
    /// directly as a graph input.
    pub encoder_size: usize,
    pub core_size: usize,
    pub scene_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub traj_dim: usize,
    /// Also wire the context embedding into the head.
    pub head_reads_embedding: bool,
    /// Give this copy its own (unshared) clone of one core weight.
    pub fork_weight_in_copy: Option<usize>,
    pub schedule: VpSchedule,
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_copies: 11,
            encoder_size: 40,
            core_size: 12,
            scene_dim: 12,
            embed_dim: 8,
            hidden_dim: 16,
            traj_dim: 24,
            head_reads_embedding: false,
            fork_weight_in_copy: None,
            schedule: VpSchedule::default(),
            t_start: crate::schedule::DEFAULT_T_START,
            t_end: crate::schedule::DEFAULT_T_END,
        }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    tensors: BTreeMap<String, TensorMeta>,
    weights: BTreeMap<String, Payload>,
    nodes: Vec<Node>,
}

impl Builder {
    fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> String {
        let n: usize = shape.iter().product();
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-1.0..1.0) * scale)
            .collect();
        self.weights
            .insert(name.to_string(), Payload::quantized(shape, data));
        name.to_string()
    }

    fn norm_weights(&mut self, prefix: &str, width: usize) -> (String, String) {
        let gamma: Vec<f64> = (0..width)
            .map(|_| 1.0 + 0.1 * self.rng.gen_range(-1.0..1.0))
            .collect();
        let beta: Vec<f64> = (0..width)
            .map(|_| 0.1 * self.rng.gen_range(-1.0..1.0))
            .collect();
        let g = format!("{prefix}_g");
        let b = format!("{prefix}_b");
        self.weights
            .insert(g.clone(), Payload::quantized(vec![width], gamma));
        self.weights
            .insert(b.clone(), Payload::quantized(vec![width], beta));
        (g, b)
    }

    fn node(&mut self, id: &str, op: OpSpec, inputs: Vec<String>, output: &str, shape: Vec<usize>) {
        self.tensors.insert(
            output.to_string(),
            TensorMeta {
                shape,
                dtype: DType::F32,
            },
        );
        self.nodes.push(Node {
            id: id.to_string(),
            op,
            inputs,
            outputs: vec![output.to_string()],
        });
    }

    fn constant(&mut self, id: &str, output: &str, shape: Vec<usize>, data: Vec<f64>) {
        let value = Payload::quantized(shape.clone(), data);
        self.node(id, OpSpec::Constant { value }, vec![], output, shape);
    }
}

/// Generate the monolithic fixture graph.
pub fn generate_unrolled_fixture(spec: &FixtureSpec) -> Result<Graph, GraphError> {
    if spec.n_copies < 2 {
        return Err(GraphError::FixtureSpec(format!(
            "n_copies must be >= 2, got {}",
            spec.n_copies
        )));
    }
    if spec.encoder_size != 0 && spec.encoder_size < MIN_ENCODER_SIZE {
        return Err(GraphError::FixtureSpec(format!(
            "encoder_size must be 0 or >= {MIN_ENCODER_SIZE}, got {}",
            spec.encoder_size
        )));
    }
    if spec.core_size < MIN_CORE_SIZE {
        return Err(GraphError::FixtureSpec(format!(
            "core_size must be >= {MIN_CORE_SIZE}, got {}",
            spec.core_size
        )));
    }
    if let Some(k) = spec.fork_weight_in_copy {
        if k >= spec.n_copies {
            return Err(GraphError::FixtureSpec(format!(
                "fork copy index {k} out of range for {} copies",
                spec.n_copies
            )));
        }
    }
    let n_steps = spec.n_copies - 1;
    let grid = TimestepGrid::log_snr_uniform(&spec.schedule, n_steps, spec.t_start, spec.t_end)?;

    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        tensors: BTreeMap::new(),
        weights: BTreeMap::new(),
        nodes: Vec::new(),
    };
    let mut inputs = Vec::new();

    // ---- encoder chain ----
    let c_emb = if spec.encoder_size == 0 {
        inputs.push(InputDecl {
            name: "c_emb".into(),
            shape: vec![1, spec.embed_dim],
            dtype: DType::F32,
        });
        "c_emb".to_string()
    } else {
        inputs.push(InputDecl {
            name: "scene".into(),
            shape: vec![1, spec.scene_dim],
            dtype: DType::F32,
        });
        let w0 = b.weight(
            "enc.w0",
            vec![spec.scene_dim, spec.embed_dim],
            spec.scene_dim,
        );
        b.node(
            "enc_mm0",
            OpSpec::MatMul,
            vec!["scene".into(), w0],
            "e0",
            vec![1, spec.embed_dim],
        );
        let mut cur = "e0".to_string();
        for j in 0..spec.encoder_size - MIN_ENCODER_SIZE {
            let out = format!("e_f{j}");
            match j % 3 {
                0 => {
                    b.node(
                        &format!("enc_gelu{j}"),
                        OpSpec::Gelu,
                        vec![cur],
                        &out,
                        vec![1, spec.embed_dim],
                    );
                }
                1 => {
                    let w = b.weight(
                        &format!("enc.fw{j}"),
                        vec![spec.embed_dim, spec.embed_dim],
                        spec.embed_dim,
                    );
                    b.node(
                        &format!("enc_mm{j}"),
                        OpSpec::MatMul,
                        vec![cur, w],
                        &out,
                        vec![1, spec.embed_dim],
                    );
                }
                _ => {
                    let w = b.weight(&format!("enc.fb{j}"), vec![1, spec.embed_dim], 1);
                    b.node(
                        &format!("enc_add{j}"),
                        OpSpec::Add,
                        vec![cur, w],
                        &out,
                        vec![1, spec.embed_dim],
                    );
                }
            }
            cur = out;
        }
        let (g, beta) = b.norm_weights("enc.ln", spec.embed_dim);
        b.node(
            "enc_ln",
            OpSpec::LayerNorm { epsilon: 1e-5 },
            vec![cur, g, beta],
            "c_emb",
            vec![1, spec.embed_dim],
        );
        "c_emb".to_string()
    };

    inputs.push(InputDecl {
        name: "x_init".into(),
        shape: vec![1, spec.traj_dim],
        dtype: DType::F32,
    });

    // shared core weights
    let w_x = b.weight(
        "core.w_x",
        vec![spec.traj_dim, spec.hidden_dim],
        spec.traj_dim,
    );
    let w_c = b.weight(
        "core.w_c",
        vec![spec.embed_dim, spec.hidden_dim],
        spec.embed_dim,
    );
    let w_t = b.weight("core.w_t", vec![1, spec.hidden_dim], 1);
    let (ln_g, ln_b) = b.norm_weights("core.ln", spec.hidden_dim);
    let w_o = b.weight(
        "core.w_o",
        vec![spec.hidden_dim, spec.traj_dim],
        spec.hidden_dim,
    );
    let n_fillers = spec.core_size - MIN_CORE_SIZE;
    let filler_weights: Vec<Option<String>> = (0..n_fillers)
        .map(|j| {
            if j % 2 == 0 {
                Some(b.weight(
                    &format!("core.fw{j}"),
                    vec![spec.hidden_dim, spec.hidden_dim],
                    spec.hidden_dim,
                ))
            } else {
                None // Gelu filler
            }
        })
        .collect();
    // the deliberately forked copy gets its own clone of core.w_x
    let w_x_fork = spec.fork_weight_in_copy.map(|_| {
        let mut payload = b.weights["core.w_x"].clone();
        payload.data[0] = (payload.data[0] + 0.125) as f32 as f64;
        b.weights.insert("core.w_x_fork".into(), payload);
        "core.w_x_fork".to_string()
    });

    // per-copy solver coefficients, f32-quantized like any baked constant
    let times = grid.times();
    let mut x_cur = "x_init".to_string();
    let mut last_x0 = String::new();
    for i in 0..spec.n_copies {
        let t_tensor = format!("t_{i}");
        b.constant(
            &format!("t_const_{i}"),
            &t_tensor,
            vec![1, 1],
            vec![times[i]],
        );

        let wx = match (&w_x_fork, spec.fork_weight_in_copy) {
            (Some(fork), Some(k)) if k == i => fork.clone(),
            _ => w_x.clone(),
        };
        let p = |suffix: &str| format!("c{i}_{suffix}");
        let t_name = |suffix: &str| format!("c{i}.{suffix}");
        b.node(
            &p("xp"),
            OpSpec::MatMul,
            vec![x_cur.clone(), wx],
            &t_name("xp"),
            vec![1, spec.hidden_dim],
        );
        b.node(
            &p("cp"),
            OpSpec::MatMul,
            vec![c_emb.clone(), w_c.clone()],
            &t_name("cp"),
            vec![1, spec.hidden_dim],
        );
        b.node(
            &p("tp"),
            OpSpec::MatMul,
            vec![t_tensor, w_t.clone()],
            &t_name("tp"),
            vec![1, spec.hidden_dim],
        );
        b.node(
            &p("add1"),
            OpSpec::Add,
            vec![t_name("xp"), t_name("cp")],
            &t_name("s1"),
            vec![1, spec.hidden_dim],
        );
        b.node(
            &p("add2"),
            OpSpec::Add,
            vec![t_name("s1"), t_name("tp")],
            &t_name("s2"),
            vec![1, spec.hidden_dim],
        );
        b.node(
            &p("ln"),
            OpSpec::LayerNorm { epsilon: 1e-5 },
            vec![t_name("s2"), ln_g.clone(), ln_b.clone()],
            &t_name("ln"),
            vec![1, spec.hidden_dim],
        );
        b.node(
            &p("act"),
            OpSpec::Gelu,
            vec![t_name("ln")],
            &t_name("act"),
            vec![1, spec.hidden_dim],
        );
        let mut cur = t_name("act");
        for (j, fw) in filler_weights.iter().enumerate() {
            let out = t_name(&format!("f{j}"));
            match fw {
                Some(w) => b.node(
                    &p(&format!("fmm{j}")),
                    OpSpec::MatMul,
                    vec![cur, w.clone()],
                    &out,
                    vec![1, spec.hidden_dim],
                ),
                None => b.node(
                    &p(&format!("fgelu{j}")),
                    OpSpec::Gelu,
                    vec![cur],
                    &out,
                    vec![1, spec.hidden_dim],
                ),
            }
            cur = out;
        }
        let x0 = format!("x0hat_{i}");
        b.node(
            &p("out"),
            OpSpec::MatMul,
            vec![cur, w_o.clone()],
            &x0,
            vec![1, spec.traj_dim],
        );
        last_x0 = x0.clone();

        if i + 1 < spec.n_copies {
            let (t_s, t_t) = (times[i], times[i + 1]);
            let (_, sigma_s, lambda_s) = spec.schedule.alpha_sigma_lambda(t_s)?;
            let (alpha_t, sigma_t, lambda_t) = spec.schedule.alpha_sigma_lambda(t_t)?;
            let h = lambda_t - lambda_s;
            let sr = sigma_t / sigma_s;
            let dw = alpha_t * -f64::exp_m1(-h);
            b.constant(
                &format!("sr_const_{i}"),
                &format!("sr_{i}"),
                vec![1, 1],
                vec![sr],
            );
            b.constant(
                &format!("dw_const_{i}"),
                &format!("dw_{i}"),
                vec![1, 1],
                vec![dw],
            );
            let x_next = format!("x_{}", i + 1);
            b.node(
                &format!("s{i}_mulx"),
                OpSpec::Mul,
                vec![x_cur.clone(), format!("sr_{i}")],
                &format!("s{i}.sx"),
                vec![1, spec.traj_dim],
            );
            b.node(
                &format!("s{i}_muld"),
                OpSpec::Mul,
                vec![x0, format!("dw_{i}")],
                &format!("s{i}.dx"),
                vec![1, spec.traj_dim],
            );
            b.node(
                &format!("s{i}_add"),
                OpSpec::Add,
                vec![format!("s{i}.sx"), format!("s{i}.dx")],
                &x_next,
                vec![1, spec.traj_dim],
            );
            x_cur = x_next;
        }
    }

    // ---- turn-indicator head ----
    let w_h = b.weight("head.w", vec![spec.traj_dim, 4], spec.traj_dim);
    let b_h = b.weight("head.b", vec![1, 4], 1);
    let head_in = if spec.head_reads_embedding {
        let w_hc = b.weight("head.w_c", vec![spec.embed_dim, 4], spec.embed_dim);
        b.node(
            "head_mm",
            OpSpec::MatMul,
            vec![last_x0.clone(), w_h],
            "h.traj",
            vec![1, 4],
        );
        b.node(
            "head_mm_c",
            OpSpec::MatMul,
            vec![c_emb, w_hc],
            "h.ctx",
            vec![1, 4],
        );
        b.node(
            "head_addc",
            OpSpec::Add,
            vec!["h.traj".into(), "h.ctx".into()],
            "h.sum",
            vec![1, 4],
        );
        "h.sum".to_string()
    } else {
        b.node(
            "head_mm",
            OpSpec::MatMul,
            vec![last_x0.clone(), w_h],
            "h.traj",
            vec![1, 4],
        );
        "h.traj".to_string()
    };
    b.node(
        "head_add",
        OpSpec::Add,
        vec![head_in, b_h],
        "y_turn",
        vec![1, 4],
    );

    let g = Graph {
        name: format!("unrolled_fixture_seed{}", spec.seed),
        inputs,
        outputs: vec![last_x0, "y_turn".into()],
        tensors: b.tensors,
        weights: b.weights,
        nodes: b.nodes,
    };
    g.validate()?;
    Ok(g)
}
