use crate::model::ModelConfig;
use crate::numeric::{FfnWeights, Matrix};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Vec<T>,
    pub ffn: FfnWeights<T>,
}

/// Full parameter set, partitioned by block. The FFN weights of any block
/// are independently addressable and copyable, which is what adaptation
/// sessions rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embed: Matrix<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Vec<T>,
    pub unembed: Matrix<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Random initialization: normal(0, 0.02) weights, unit norm gains,
    /// residual output projections scaled down by 1/sqrt(2K).
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).unwrap();
        let mut draw = |rows: usize, cols: usize, scale: f64| -> Matrix<T> {
            let data = (0..rows * cols)
                .map(|_| T::from_f64(normal.sample(&mut rng) * scale))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let d = config.d_model;
        let d_ff = config.d_ff;
        let resid_scale = 1.0 / ((2 * config.num_blocks) as f64).sqrt();
        let blocks = (0..config.num_blocks)
            .map(|_| BlockParams {
                attn_norm: vec![T::one(); d],
                wq: draw(d, d, 1.0),
                wk: draw(d, d, 1.0),
                wv: draw(d, d, 1.0),
                wo: draw(d, d, resid_scale),
                ffn_norm: vec![T::one(); d],
                ffn: FfnWeights {
                    w_gate: draw(d_ff, d, 1.0),
                    b_gate: vec![T::zero(); d_ff],
                    w_up: draw(d_ff, d, 1.0),
                    b_up: vec![T::zero(); d_ff],
                    w_down: draw(d, d_ff, resid_scale),
                    b_down: vec![T::zero(); d],
                },
            })
            .collect();
        ModelParams {
            embed: draw(config.vocab_size, d, 1.0),
            blocks,
            final_norm: vec![T::one(); d],
            unembed: draw(config.vocab_size, d, 1.0),
            config,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_m = |m: &Matrix<T>| {
            Matrix::from_vec(
                m.rows(),
                m.cols(),
                m.data().iter().map(|v| U::from_f64(v.to_f64s())).collect(),
            )
        };
        let cast_v = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64s())).collect::<Vec<U>>();
        ModelParams {
            config: self.config.clone(),
            embed: cast_m(&self.embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    attn_norm: cast_v(&b.attn_norm),
                    wq: cast_m(&b.wq),
                    wk: cast_m(&b.wk),
                    wv: cast_m(&b.wv),
                    wo: cast_m(&b.wo),
                    ffn_norm: cast_v(&b.ffn_norm),
                    ffn: FfnWeights {
                        w_gate: cast_m(&b.ffn.w_gate),
                        b_gate: cast_v(&b.ffn.b_gate),
                        w_up: cast_m(&b.ffn.w_up),
                        b_up: cast_v(&b.ffn.b_up),
                        w_down: cast_m(&b.ffn.w_down),
                        b_down: cast_v(&b.ffn.b_down),
                    },
                })
                .collect(),
            final_norm: cast_v(&self.final_norm),
            unembed: cast_m(&self.unembed),
        }
    }
}

/// Replacement FFN weights for the top `ffns.len()` blocks; `ffns[i]`
/// overrides block `first_block + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnOverrides<T> {
    pub first_block: usize,
    pub ffns: Vec<FfnWeights<T>>,
}

impl<T: Scalar> FfnOverrides<T> {
    /// Copies the FFN slices of the top `n` blocks out of `params`.
    pub fn copy_top_n(params: &ModelParams<T>, n: usize) -> Self {
        let k = params.config.num_blocks;
        assert!(n >= 1 && n <= k, "adapted block count out of range");
        let first_block = k - n;
        FfnOverrides {
            first_block,
            ffns: params.blocks[first_block..].iter().map(|b| b.ffn.clone()).collect(),
        }
    }

    pub fn get(&self, block: usize) -> Option<&FfnWeights<T>> {
        block
            .checked_sub(self.first_block)
            .and_then(|i| self.ffns.get(i))
    }
}

/// Read view of a model with optional FFN overrides; forward passes go
/// through this so adapted and base behavior share one code path.
#[derive(Clone, Copy)]
pub struct ModelView<'a, T> {
    pub params: &'a ModelParams<T>,
    pub overrides: Option<&'a FfnOverrides<T>>,
}

impl<'a, T: Scalar> ModelView<'a, T> {
    pub fn base(params: &'a ModelParams<T>) -> Self {
        ModelView { params, overrides: None }
    }

    pub fn adapted(params: &'a ModelParams<T>, overrides: &'a FfnOverrides<T>) -> Self {
        ModelView { params, overrides: Some(overrides) }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// FFN weights in effect for `block`.
    pub fn ffn(&self, block: usize) -> &FfnWeights<T> {
        self.overrides
            .and_then(|o| o.get(block))
            .unwrap_or(&self.params.blocks[block].ffn)
    }
}
