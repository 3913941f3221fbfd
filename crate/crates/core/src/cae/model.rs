use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Dims};
use super::{CaeArch, CaeError, Real};
use crate::patchex::PatchSet;

/// Samples processed together inside one forward/backward sweep. Keeps the
/// im2col buffers small; results do not depend on it except through the
/// order of floating-point additions.
const CHUNK: usize = 64;

/// Flat batch of `n` patches, each `len` values in `(y, x, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub n: usize,
    pub len: usize,
    pub values: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(n: usize, len: usize, values: Vec<T>) -> Result<Self, CaeError> {
        if values.len() != n * len {
            return Err(CaeError::ShapeMismatch(format!(
                "{} values for {n} samples of length {len}",
                values.len()
            )));
        }
        Ok(Self { n, len, values })
    }

    pub fn from_patch_set(set: &PatchSet) -> Self {
        let len = set.patch_len();
        let values = set
            .patches()
            .iter()
            .flat_map(|p| p.values.iter().map(|&v| T::from_f64(v)))
            .collect();
        Self {
            n: set.len(),
            len,
            values,
        }
    }

    pub fn sample(&self, i: usize) -> &[T] {
        &self.values[i * self.len..(i + 1) * self.len]
    }

    /// Copies the given samples, in order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.len);
        for &i in indices {
            values.extend_from_slice(self.sample(i));
        }
        Self {
            n: indices.len(),
            len: self.len,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub c_in: usize,
    pub c_out: usize,
    /// `[(ky * 3 + kx) * c_in + ci][co]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// `n x latent_dim`, row-major.
    pub latents: Vec<T>,
    /// Same layout as the input batch.
    pub reconstructions: Vec<T>,
}

/// Per-layer parameter gradients, same shapes as the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weight: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weight.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

struct Trace<T> {
    dims: Dims,
    col: Vec<T>,
    /// Stage output after the nonlinearity, before pooling.
    act: Vec<T>,
    pool_arg: Option<Vec<u32>>,
    /// Pre-upsample dims for decoder stages that upsample.
    upsampled_from: Option<Dims>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder<T: Real = f32> {
    arch: CaeArch,
    seed: u64,
    layers: Vec<ConvLayer<T>>,
}

impl<T: Real> AutoEncoder<T> {
    /// Glorot-uniform kernels, zero biases.
    pub fn init(arch: CaeArch, seed: u64) -> Result<Self, CaeError> {
        arch.validate()?;
        let mut rng = crate::seed::rng(seed);
        let layers = arch
            .conv_shapes()
            .into_iter()
            .map(|(c_in, c_out)| {
                let limit = (6.0 / (9.0 * (c_in + c_out) as f64)).sqrt();
                let weight = (0..9 * c_in * c_out)
                    .map(|_| T::from_f64(rng.gen_range(-limit..=limit)))
                    .collect();
                ConvLayer {
                    c_in,
                    c_out,
                    weight,
                    bias: vec![T::zero(); c_out],
                }
            })
            .collect();
        Ok(Self { arch, seed, layers })
    }

    pub fn arch(&self) -> &CaeArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, kernel then bias.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<(), CaeError> {
        if params.len() != self.param_count() {
            return Err(CaeError::ShapeMismatch(format!(
                "{} parameters supplied, model has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Same model in another storage precision.
    pub fn cast<U: Real>(&self) -> AutoEncoder<U> {
        AutoEncoder {
            arch: self.arch.clone(),
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    c_in: l.c_in,
                    c_out: l.c_out,
                    weight: l.weight.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                    bias: l.bias.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<(), CaeError> {
        if batch.len != self.arch.input_len() || batch.values.len() != batch.n * batch.len {
            return Err(CaeError::ShapeMismatch(format!(
                "batch samples have {} values, network expects {}x{}x{} = {}",
                batch.len,
                self.arch.size,
                self.arch.size,
                self.arch.channels,
                self.arch.input_len()
            )));
        }
        Ok(())
    }

    fn encode_chunk(&self, input: &[T], n: usize, traces: Option<&mut Vec<Trace<T>>>) -> Vec<T> {
        let arch = &self.arch;
        let pools = arch.encoder_pools();
        let mut traces = traces;
        let mut x = input.to_vec();
        let mut dims = Dims {
            n,
            h: arch.size,
            w: arch.size,
            c: arch.channels,
        };
        for (i, &pool) in pools.iter().enumerate() {
            let layer = &self.layers[i];
            let (mut act, col) = layers::conv_forward(&x, dims, &layer.weight, &layer.bias, layer.c_out);
            layers::relu_in_place(&mut act);
            let conv_dims = dims;
            dims.c = layer.c_out;
            let (next, pool_arg) = if pool {
                let (p, arg) = layers::maxpool_forward(&act, dims);
                dims.h /= 2;
                dims.w /= 2;
                (p, Some(arg))
            } else {
                (act.clone(), None)
            };
            if let Some(t) = traces.as_deref_mut() {
                t.push(Trace {
                    dims: conv_dims,
                    col,
                    act,
                    pool_arg,
                    upsampled_from: None,
                });
            }
            x = next;
        }
        x
    }

    fn decode_chunk(&self, latent: &[T], n: usize, mut traces: Option<&mut Vec<Trace<T>>>) -> Vec<T> {
        let arch = &self.arch;
        let s = arch.stages();
        let pools = arch.encoder_pools();
        let mut x = latent.to_vec();
        let mut dims = Dims {
            n,
            h: 1,
            w: 1,
            c: arch.latent_dim(),
        };
        for j in 0..s {
            let layer = &self.layers[s + j];
            let upsampled_from = if pools[s - 1 - j] {
                let from = dims;
                x = layers::upsample_forward(&x, dims);
                dims.h *= 2;
                dims.w *= 2;
                Some(from)
            } else {
                None
            };
            let (mut act, col) = layers::conv_forward(&x, dims, &layer.weight, &layer.bias, layer.c_out);
            if j + 1 < s {
                layers::relu_in_place(&mut act);
            }
            if let Some(t) = traces.as_deref_mut() {
                t.push(Trace {
                    dims,
                    col,
                    act: act.clone(),
                    pool_arg: None,
                    upsampled_from,
                });
            }
            dims.c = layer.c_out;
            x = act;
        }
        x
    }

    /// Latent codes and reconstructions for every sample.
    pub fn forward(&self, batch: &Batch<T>) -> Result<ForwardOutput<T>, CaeError> {
        self.check_batch(batch)?;
        let l = self.arch.latent_dim();
        let mut latents = Vec::with_capacity(batch.n * l);
        let mut reconstructions = Vec::with_capacity(batch.values.len());
        for start in (0..batch.n).step_by(CHUNK) {
            let n = CHUNK.min(batch.n - start);
            let input = &batch.values[start * batch.len..(start + n) * batch.len];
            let z = self.encode_chunk(input, n, None);
            let r = self.decode_chunk(&z, n, None);
            latents.extend_from_slice(&z);
            reconstructions.extend_from_slice(&r);
        }
        Ok(ForwardOutput {
            latents,
            reconstructions,
        })
    }

    /// Latent codes only, `n x latent_dim` row-major.
    pub fn encode_batch(&self, batch: &Batch<T>) -> Result<Vec<T>, CaeError> {
        self.check_batch(batch)?;
        let mut latents = Vec::with_capacity(batch.n * self.arch.latent_dim());
        for start in (0..batch.n).step_by(CHUNK) {
            let n = CHUNK.min(batch.n - start);
            let input = &batch.values[start * batch.len..(start + n) * batch.len];
            latents.extend(self.encode_chunk(input, n, None));
        }
        Ok(latents)
    }

    pub fn encode(&self, patch: &[T]) -> Result<Vec<T>, CaeError> {
        let batch = Batch::new(1, patch.len(), patch.to_vec())?;
        self.encode_batch(&batch)
    }

    /// Mean reconstruction loss of the batch and its gradient with respect
    /// to every parameter.
    pub fn loss_and_gradients(&self, batch: &Batch<T>) -> Result<(f64, Gradients<T>), CaeError> {
        self.check_batch(batch)?;
        if batch.n == 0 {
            return Err(CaeError::ShapeMismatch("empty batch".into()));
        }
        let s = self.arch.stages();
        let mut acc_w: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect();
        let mut acc_b: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
        let mut loss_sum = 0.0f64;
        let denom = (batch.n * batch.len) as f64;

        for start in (0..batch.n).step_by(CHUNK) {
            let n = CHUNK.min(batch.n - start);
            let input = &batch.values[start * batch.len..(start + n) * batch.len];
            let mut traces = Vec::with_capacity(2 * s);
            let z = self.encode_chunk(input, n, Some(&mut traces));
            let recon = self.decode_chunk(&z, n, Some(&mut traces));

            let mut grad: Vec<T> = Vec::with_capacity(recon.len());
            for (&r, &x) in recon.iter().zip(input) {
                let diff = r.to_f64() - x.to_f64();
                loss_sum += diff * diff;
                grad.push(T::from_f64(2.0 * diff / denom));
            }

            for li in (0..2 * s).rev() {
                let layer = &self.layers[li];
                let trace = &traces[li];
                let is_decoder = li >= s;
                let is_last = li == 2 * s - 1;
                if !is_decoder {
                    if let Some(arg) = &trace.pool_arg {
                        grad = layers::maxpool_backward(&grad, arg, trace.act.len());
                    }
                }
                if !is_last {
                    layers::relu_backward_in_place(&mut grad, &trace.act);
                }
                let g = layers::conv_backward(&grad, &trace.col, trace.dims, &layer.weight, layer.c_out, li > 0);
                for (a, &v) in acc_w[li].iter_mut().zip(&g.dweight) {
                    *a += v.to_f64();
                }
                for (a, &v) in acc_b[li].iter_mut().zip(&g.dbias) {
                    *a += v.to_f64();
                }
                if let Some(mut dinput) = g.dinput {
                    if let Some(from) = trace.upsampled_from {
                        dinput = layers::upsample_backward(&dinput, from);
                    }
                    grad = dinput;
                }
            }
        }
        let loss = loss_sum / denom;
        if !loss.is_finite() {
            return Err(CaeError::NonFinite);
        }
        let convert = |v: Vec<Vec<f64>>| -> Vec<Vec<T>> {
            v.into_iter()
                .map(|l| l.into_iter().map(T::from_f64).collect())
                .collect()
        };
        Ok((
            loss,
            Gradients {
                weight: convert(acc_w),
                bias: convert(acc_b),
            },
        ))
    }

    /// Gradient of the mean reconstruction loss.
    pub fn backward(&self, batch: &Batch<T>) -> Result<Gradients<T>, CaeError> {
        self.loss_and_gradients(batch).map(|(_, g)| g)
    }

    /// `w <- w - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, learning_rate: f64) -> Result<(), CaeError> {
        if grads.weight.len() != self.layers.len() || grads.bias.len() != self.layers.len() {
            return Err(CaeError::ShapeMismatch("gradient layer count".into()));
        }
        let lr = T::from_f64(learning_rate);
        for (l, (gw, gb)) in self.layers.iter_mut().zip(grads.weight.iter().zip(&grads.bias)) {
            if gw.len() != l.weight.len() || gb.len() != l.bias.len() {
                return Err(CaeError::ShapeMismatch("gradient layer shape".into()));
            }
            for (w, &g) in l.weight.iter_mut().zip(gw) {
                *w -= lr * g;
            }
            for (b, &g) in l.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
        Ok(())
    }
}

/// Mean over the batch of the per-sample mean squared error.
pub fn loss<T: Real>(reconstructions: &[T], batch: &Batch<T>) -> Result<f64, CaeError> {
    if reconstructions.len() != batch.values.len() || batch.n == 0 {
        return Err(CaeError::ShapeMismatch(format!(
            "{} reconstruction values for a batch of {}",
            reconstructions.len(),
            batch.values.len()
        )));
    }
    let sum: f64 = reconstructions
        .iter()
        .zip(&batch.values)
        .map(|(&r, &x)| (r.to_f64() - x.to_f64()).powi(2))
        .sum();
    Ok(sum / batch.values.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    /// `[c_out][c_in][ky][kx]`
    weights: Vec<Vec<Vec<Vec<f32>>>>,
    biases: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    arch: CaeArch,
    seed: u64,
    layers: Vec<LayerFile>,
}

impl AutoEncoder<f32> {
    pub fn to_json(&self) -> Result<String, CaeError> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerFile {
                weights: (0..l.c_out)
                    .map(|co| {
                        (0..l.c_in)
                            .map(|ci| {
                                (0..3)
                                    .map(|ky| {
                                        (0..3)
                                            .map(|kx| l.weight[((ky * 3 + kx) * l.c_in + ci) * l.c_out + co])
                                            .collect()
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect(),
                biases: l.bias.clone(),
            })
            .collect();
        let file = ModelFile {
            arch: self.arch.clone(),
            seed: self.seed,
            layers,
        };
        serde_json::to_string(&file).map_err(|e| CaeError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, CaeError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| CaeError::Format(e.to_string()))?;
        file.arch.validate()?;
        let shapes = file.arch.conv_shapes();
        if shapes.len() != file.layers.len() {
            return Err(CaeError::Format(format!(
                "{} layers in file, architecture needs {}",
                file.layers.len(),
                shapes.len()
            )));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for ((c_in, c_out), lf) in shapes.into_iter().zip(file.layers) {
            let bad = || CaeError::Format(format!("layer {c_in}->{c_out} has the wrong shape"));
            if lf.weights.len() != c_out || lf.biases.len() != c_out {
                return Err(bad());
            }
            let mut weight = vec![0.0f32; 9 * c_in * c_out];
            for (co, per_out) in lf.weights.iter().enumerate() {
                if per_out.len() != c_in {
                    return Err(bad());
                }
                for (ci, kernel) in per_out.iter().enumerate() {
                    if kernel.len() != 3 || kernel.iter().any(|r| r.len() != 3) {
                        return Err(bad());
                    }
                    for ky in 0..3 {
                        for kx in 0..3 {
                            weight[((ky * 3 + kx) * c_in + ci) * c_out + co] = kernel[ky][kx];
                        }
                    }
                }
            }
            if weight.iter().chain(&lf.biases).any(|v| !v.is_finite()) {
                return Err(CaeError::Format("non-finite parameter".into()));
            }
            layers.push(ConvLayer {
                c_in,
                c_out,
                weight,
                bias: lf.biases,
            });
        }
        Ok(Self {
            arch: file.arch,
            seed: file.seed,
            layers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CaeError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CaeError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch<T: Real>(n: usize, len: usize, seed: u64) -> Batch<T> {
        let mut rng = crate::seed::rng(seed);
        let values = (0..n * len).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
        Batch::new(n, len, values).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = AutoEncoder::<f32>::init(CaeArch::per_metric(), 3).unwrap();
        let b = AutoEncoder::<f32>::init(CaeArch::per_metric(), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        let c = AutoEncoder::<f32>::init(CaeArch::per_metric(), 4).unwrap();
        assert_ne!(a, c);
        for l in a.layers() {
            let limit = (6.0 / (9.0 * (l.c_in + l.c_out) as f64)).sqrt() as f32;
            assert!(l.weight.iter().all(|w| w.abs() <= limit));
        }
        assert_eq!(a.param_count(), CaeArch::per_metric().param_count());
    }

    #[test]
    fn zero_model_outputs_zero() {
        let mut m = AutoEncoder::<f32>::init(CaeArch::per_metric(), 1).unwrap();
        m.set_params(&vec![0.0; m.param_count()]).unwrap();
        let batch = random_batch::<f32>(5, 256, 9);
        let out = m.forward(&batch).unwrap();
        assert_eq!(out.latents.len(), 5 * 32);
        assert!(out.latents.iter().all(|&v| v == 0.0));
        assert!(out.reconstructions.iter().all(|&v| v == 0.0));
        assert!(m.encode(batch.sample(0)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_and_encode_consistency() {
        let m = AutoEncoder::<f32>::init(CaeArch::per_metric(), 2).unwrap();
        let batch = random_batch::<f32>(70, 256, 1);
        let out = m.forward(&batch).unwrap();
        assert_eq!(out.reconstructions.len(), batch.values.len());
        for i in [0, 63, 64, 69] {
            let z = m.encode(batch.sample(i)).unwrap();
            assert_eq!(z.len(), 32);
            assert_eq!(&z[..], &out.latents[i * 32..(i + 1) * 32]);
        }
        let stacked = AutoEncoder::<f32>::init(CaeArch::stacked(8), 2).unwrap();
        let b8 = random_batch::<f32>(2, 16 * 16 * 8, 2);
        let out = stacked.forward(&b8).unwrap();
        assert_eq!(out.latents.len(), 2 * 64);
        assert_eq!(out.reconstructions.len(), b8.values.len());
        assert!(matches!(m.forward(&b8), Err(CaeError::ShapeMismatch(_))));
    }

    #[test]
    fn loss_values() {
        let batch = random_batch::<f64>(4, 16, 5);
        assert_eq!(loss(&batch.values, &batch).unwrap(), 0.0);
        let plus_one: Vec<f64> = batch.values.iter().map(|v| v + 1.0).collect();
        assert!((loss(&plus_one, &batch).unwrap() - 1.0).abs() < 1e-12);
        let other = random_batch::<f64>(4, 16, 6);
        let mut direct = 0.0;
        for (a, b) in other.values.iter().zip(&batch.values) {
            direct += (a - b) * (a - b);
        }
        direct /= (16 * 4) as f64;
        assert!((loss(&other.values, &batch).unwrap() - direct).abs() < 1e-12);
        assert!(loss(&other.values[..10], &batch).is_err());
    }

    #[test]
    fn zero_model_on_zero_batch_has_zero_gradient() {
        let mut m = AutoEncoder::<f64>::init(CaeArch::per_metric(), 1).unwrap();
        m.set_params(&vec![0.0; m.param_count()]).unwrap();
        let batch = Batch::new(3, 256, vec![0.0; 768]).unwrap();
        let g = m.backward(&batch).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_are_deterministic() {
        let m = AutoEncoder::<f32>::init(CaeArch::per_metric(), 7).unwrap();
        let batch = random_batch::<f32>(100, 256, 3);
        let (l1, g1) = m.loss_and_gradients(&batch).unwrap();
        let (l2, g2) = m.loss_and_gradients(&batch).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
        let out = m.forward(&batch).unwrap();
        assert!((loss(&out.reconstructions, &batch).unwrap() - l1).abs() < 1e-9);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut m = AutoEncoder::<f64>::init(
            CaeArch {
                size: 2,
                channels: 1,
                widths: vec![1],
            },
            0,
        )
        .unwrap();
        let n = m.param_count();
        m.set_params(&vec![1.0; n]).unwrap();
        let mut g = m.backward(&Batch::new(1, 4, vec![0.5; 4]).unwrap()).unwrap();
        for v in g.weight.iter_mut().chain(g.bias.iter_mut()) {
            v.iter_mut().for_each(|x| *x = 2.0);
        }
        let before = m.clone();
        m.sgd_step(&g, 0.0).unwrap();
        assert_eq!(m, before);
        m.sgd_step(&g, 0.1).unwrap();
        assert!(m.params().iter().all(|&w| (w - 0.8).abs() < 1e-15));

        let mut half = before.clone();
        half.sgd_step(&g, 0.05).unwrap();
        half.sgd_step(&g, 0.05).unwrap();
        for (a, b) in half.params().iter().zip(m.params()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn json_round_trip() {
        let m = AutoEncoder::<f32>::init(CaeArch::per_metric(), 11).unwrap();
        let back = AutoEncoder::<f32>::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        assert!(AutoEncoder::<f32>::from_json("{}").is_err());
    }
}
