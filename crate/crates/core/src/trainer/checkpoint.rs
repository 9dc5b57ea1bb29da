//! Checkpoint container.
//!
//! ```text
//! curvebert-checkpoint 1
//! [config]
//! layers = 8
//! ...
//! [state]
//! epoch = 12
//! ...
//! [tensors]
//! param encoder.layer0.attn.query.weight 256x256 0 65536
//! adam_m encoder.layer0.attn.query.weight 256x256 524288 65536
//! ...
//! [payload]
//! <little-endian f64 values, byte offsets relative to this point>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::SpectrumModel;
use crate::numerics::{AdamConfig, AdamState, ParamStore, Tensor};

const FORMAT_TAG: &str = "curvebert-checkpoint 1";
const PAYLOAD_MARKER: &str = "[payload]\n";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume or evaluate a model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub epoch: usize,
    pub best_score: f64,
    pub rng: RngState,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn model(&self) -> Result<SpectrumModel> {
        SpectrumModel::from_store(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{FORMAT_TAG}\n[config]\n{}", self.config.to_key_values());
        if !head.ends_with('\n') {
            head.push('\n');
        }
        let hex: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        let _ = write!(
            head,
            "[state]\nepoch = {}\nbest_score = {}\nrng_seed = {hex}\nrng_stream = {}\nrng_word_pos = {}\n",
            self.epoch, self.best_score, self.rng.stream, self.rng.word_pos
        );
        if let Some(opt) = &self.optimizer {
            let c = opt.config;
            let _ = write!(
                head,
                "adam_step = {}\nadam_lr = {}\nadam_weight_decay = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_epsilon = {}\n",
                opt.step, c.lr, c.weight_decay, c.beta1, c.beta2, c.epsilon
            );
        }
        head.push_str("[tensors]\n");
        let mut payload = Vec::new();
        let mut entry = |kind: &str, name: &str, t: &Tensor, head: &mut String| {
            let _ = writeln!(head, "{kind} {name} {} {} {}", dims(t.shape()), payload.len(), t.len());
            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        };
        for (name, t) in self.params.iter() {
            entry("param", name, t, &mut head);
        }
        if let Some(opt) = &self.optimizer {
            for ((name, _), (m, v)) in self.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                entry("adam_m", name, m, &mut head);
                entry("adam_v", name, v, &mut head);
            }
        }
        head.push_str(PAYLOAD_MARKER);
        let mut bytes = head.into_bytes();
        bytes.extend(payload);
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(PAYLOAD_MARKER.len() + 1)
            .position(|w| w[0] == b'\n' && &w[1..] == PAYLOAD_MARKER.as_bytes())
            .ok_or_else(|| bad("missing payload marker"))?;
        let manifest = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[split + 1 + PAYLOAD_MARKER.len()..];

        let mut lines = manifest.lines();
        if lines.next() != Some(FORMAT_TAG) {
            return Err(bad(format!("unsupported format, expected `{FORMAT_TAG}`")));
        }
        let mut section = "";
        let (mut config_text, mut state) = (String::new(), std::collections::HashMap::new());
        let mut tensors = Vec::new();
        for line in lines {
            if line.starts_with('[') {
                section = line;
                continue;
            }
            match section {
                "[config]" => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
                "[state]" => {
                    let (k, v) = line
                        .split_once(" = ")
                        .ok_or_else(|| bad(format!("bad state line `{line}`")))?;
                    state.insert(k.to_string(), v.to_string());
                }
                "[tensors]" => tensors.push(line),
                _ => return Err(bad(format!("line `{line}` outside any section"))),
            }
        }
        let config = ModelConfig::from_key_values(&config_text)?;
        let get = |k: &str| state.get(k).ok_or_else(|| bad(format!("state is missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        let int = |k: &str| -> Result<u128> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };

        let hex = get("rng_seed")?;
        if hex.len() != 64 {
            return Err(bad("rng_seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng_seed is not hex"))?;
        }
        let rng = RngState {
            seed,
            stream: int("rng_stream")? as u64,
            word_pos: int("rng_word_pos")?,
        };

        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let mut expected_offset = 0;
        for line in tensors {
            let f: Vec<&str> = line.split(' ').collect();
            let [kind, name, shape, offset, count] = f[..] else {
                return Err(bad(format!("bad tensor line `{line}`")));
            };
            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in `{line}`")));
            let shape: Vec<usize> = shape.split('x').map(parse).collect::<Result<_>>()?;
            let (offset, count) = (parse(offset)?, parse(count)?);
            if offset != expected_offset || offset + 8 * count > payload.len() {
                return Err(bad(format!("tensor `{name}` lies outside the payload")));
            }
            expected_offset += 8 * count;
            let data = payload[offset..offset + 8 * count]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            match kind {
                "param" => {
                    params.insert(name, t)?;
                }
                "adam_m" => m.push(t),
                "adam_v" => v.push(t),
                _ => return Err(bad(format!("unknown tensor kind `{kind}`"))),
            }
        }
        if expected_offset != payload.len() {
            return Err(bad("payload has trailing bytes"));
        }
        let optimizer = if state.contains_key("adam_step") {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(bad("optimizer moments do not cover every parameter"));
            }
            Some(AdamState {
                config: AdamConfig {
                    lr: num("adam_lr")?,
                    weight_decay: num("adam_weight_decay")?,
                    beta1: num("adam_beta1")?,
                    beta2: num("adam_beta2")?,
                    epsilon: num("adam_epsilon")?,
                },
                step: int("adam_step")? as u64,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            optimizer,
            epoch: int("epoch")? as usize,
            best_score: num("best_score")?,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            num_classes: 3,
            ..ModelConfig::sized(1, 2, 8, 4, 16)
        };
        let model = SpectrumModel::finetuning(&cfg, 5).unwrap();
        let mut opt = AdamState::new(AdamConfig::default(), &model.store);
        opt.step = 7;
        opt.m[0].data_mut()[0] = 0.125;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(3);
        rng.set_word_pos(77);
        Checkpoint {
            config: cfg,
            params: model.store,
            optimizer: Some(opt),
            epoch: 4,
            best_score: 1.0 / 3.0,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.epoch, 4);
        assert_eq!(back.best_score.to_bits(), ck.best_score.to_bits());
        assert_eq!(back.rng, ck.rng);
        assert_eq!(back.optimizer, ck.optimizer);
        for ((na, a), (nb, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }

        let curve: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let run = |ck: &Checkpoint| {
            let m = ck.model().unwrap();
            let seq = m.compose(&curve, None).unwrap();
            let mut g = Graph::new();
            let l = m.logits(&mut g, &[seq], None).unwrap();
            g.value(l).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(&ck), run(&back));
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        assert_eq!(rng.random::<u64>(), resumed.random::<u64>());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"something else\n[payload]\n").is_err());
        let mut wrong = bytes.clone();
        wrong[..FORMAT_TAG.len()].copy_from_slice(b"curvebert-checkpoint 9");
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }
}
