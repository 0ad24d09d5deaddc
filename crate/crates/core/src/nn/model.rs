use std::ops::Range;

use super::config::NetworkConfig;
use super::ops::{self, NormCache};
use super::params::{count_parameters, ParamLayout};
use crate::error::{shape_err, Error, Result};
use crate::loss::{deep_supervision_with_grad, LossWeights, SegLoss};
use crate::tensor::{Field, Mask, Real};

/// Encoder outputs `z_s`, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures<T> {
    pub stages: Vec<Field<T>>,
}

/// One `G x C_s` row-major matrix per decoder stage, finest first. Stages
/// without fusion carry zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceTensors<T> {
    pub guidance_dim: usize,
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> GuidanceTensors<T> {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        GuidanceTensors {
            guidance_dim: cfg.guidance_dim,
            tensors: (0..cfg.n_stages - 1)
                .map(|s| vec![T::zero(); cfg.guidance_dim * cfg.channels[s]])
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Logits per supervised scale, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle<T> {
    pub logits: Vec<Field<T>>,
}

/// `concat(z, T z)` over channels.
pub fn fuse<T: Real>(z: &Field<T>, t: &[T], guidance_dim: usize) -> Result<Field<T>> {
    if t.len() != guidance_dim * z.channels {
        return Err(shape_err!(
            "guidance of {} values is not {}x{}",
            t.len(),
            guidance_dim,
            z.channels
        ));
    }
    Ok(ops::fuse_channels(z, t, guidance_dim))
}

struct EncStageTape<T> {
    norm_in: NormCache<T>,
    a: Field<T>,
    norm_res: NormCache<T>,
}

/// Intermediate values of an encoder pass.
pub struct EncoderTape<T> {
    input: Field<T>,
    stages: Vec<EncStageTape<T>>,
}

struct LayerTape<T> {
    x_in: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    o: Vec<T>,
    ln1: NormCache<T>,
    x1: Vec<T>,
    h: Vec<T>,
    ln2: NormCache<T>,
}

/// Intermediate values of a prompt-decoder pass.
pub struct PromptTape<T> {
    q_in: Vec<T>,
    tokens: Vec<T>,
    n_tokens: usize,
    mem: Vec<T>,
    layers: Vec<LayerTape<T>>,
    x_out: Vec<T>,
    adapter_hidden: Vec<Option<Vec<T>>>,
    active: bool,
}

struct DecStageTape<T> {
    cat: Field<T>,
    norm: NormCache<T>,
    zprime: Field<T>,
    fused: Option<Field<T>>,
}

impl<T> DecStageTape<T> {
    fn out(&self) -> &Field<T> {
        self.fused.as_ref().unwrap_or(&self.zprime)
    }
}

/// Intermediate values of a decoder pass.
pub struct DecoderTape<T> {
    stages: Vec<DecStageTape<T>>,
}

impl<T: Real> DecoderTape<T> {
    /// Decoder feature `z'_s` before fusion.
    pub fn pre_fusion(&self, scale: usize) -> &Field<T> {
        &self.stages[scale].zprime
    }
}

/// One prompt with its per-scale targets (finest first).
pub struct PromptExample<'a, T> {
    pub embedding: &'a [T],
    pub targets: &'a [Mask],
}

/// An image and the prompts evaluated against it.
pub struct ImageExample<'a, T> {
    pub volume: &'a Field<T>,
    pub prompts: Vec<PromptExample<'a, T>>,
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// Mean over prompt/image pairs of the deep-supervision loss.
    pub loss: f64,
    pub pair_losses: Vec<f64>,
    /// Unweighted loss per scale, averaged over pairs.
    pub per_scale: Vec<SegLoss>,
}

fn pair_mut<T>(buf: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    if a.start < b.start {
        assert!(a.end <= b.start);
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.len()])
    } else {
        assert!(b.end <= a.start);
        let (lo, hi) = buf.split_at_mut(a.start);
        (&mut hi[..a.len()], &mut lo[b])
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// The text-prompted segmentation network. Parameters are held outside as a
/// flat buffer laid out by [`ParamLayout`].
#[derive(Clone, Debug)]
pub struct FusionNet {
    config: NetworkConfig,
    layout: ParamLayout,
}

impl FusionNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        debug_assert_eq!(layout.total(), count_parameters(&config));
        Ok(FusionNet { config, layout })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        self.layout.initialize(seed)
    }

    fn p<'a, T>(&self, params: &'a [T], name: &str) -> &'a [T] {
        &params[self.layout.range(name)]
    }

    fn check_params<T>(&self, params: &[T]) -> Result<()> {
        if params.len() != self.layout.total() {
            return Err(shape_err!(
                "{} parameters supplied, network has {}",
                params.len(),
                self.layout.total()
            ));
        }
        Ok(())
    }

    fn stage_in<'a, T: Real>(&self, s: usize, input: &'a Field<T>, zs: &'a [Field<T>]) -> &'a Field<T> {
        if s == 0 {
            input
        } else {
            &zs[s - 1]
        }
    }

    // ---------------------------------------------------------------- encoder

    pub fn encode<T: Real>(&self, params: &[T], volume: &Field<T>) -> Result<MultiScaleFeatures<T>> {
        self.encode_with_tape(params, volume).map(|(f, _)| f)
    }

    pub fn encode_with_tape<T: Real>(
        &self,
        params: &[T],
        volume: &Field<T>,
    ) -> Result<(MultiScaleFeatures<T>, EncoderTape<T>)> {
        self.check_params(params)?;
        if volume.channels != 1 {
            return Err(shape_err!("expected a 1-channel volume, got {}", volume.channels));
        }
        self.config.check_input_dims(volume.dims)?;
        let k = self.config.conv_kernel;
        let mut zs: Vec<Field<T>> = Vec::with_capacity(self.config.n_stages);
        let mut tape = Vec::with_capacity(self.config.n_stages);
        for s in 0..self.config.n_stages {
            let c = self.config.channels[s];
            let x = self.stage_in(s, volume, &zs);
            let stride = if s == 0 { 1 } else { 2 };
            let c1 = ops::conv3d(x, self.p(params, &format!("enc{s}.conv_in.w")), None, c, k, stride);
            let (mut a, norm_in) = ops::instance_norm(
                &c1,
                self.p(params, &format!("enc{s}.norm_in.gamma")),
                self.p(params, &format!("enc{s}.norm_in.beta")),
            );
            ops::leaky_relu(&mut a.data);
            let c2 = ops::conv3d(&a, self.p(params, &format!("enc{s}.conv_res.w")), None, c, k, 1);
            let (mut z, norm_res) = ops::instance_norm(
                &c2,
                self.p(params, &format!("enc{s}.norm_res.gamma")),
                self.p(params, &format!("enc{s}.norm_res.beta")),
            );
            z.add_assign(&a);
            ops::leaky_relu(&mut z.data);
            zs.push(z);
            tape.push(EncStageTape { norm_in, a, norm_res });
        }
        Ok((
            MultiScaleFeatures { stages: zs },
            EncoderTape {
                input: volume.clone(),
                stages: tape,
            },
        ))
    }

    /// Accumulates parameter gradients given gradients of every feature map.
    pub fn encode_backward<T: Real>(
        &self,
        params: &[T],
        features: &MultiScaleFeatures<T>,
        tape: &EncoderTape<T>,
        mut grad_features: Vec<Field<T>>,
        grads: &mut [T],
    ) {
        let k = self.config.conv_kernel;
        for s in (0..self.config.n_stages).rev() {
            let st = &tape.stages[s];
            let z = &features.stages[s];
            let mut g = std::mem::replace(&mut grad_features[s], Field::zeros(0, [0, 0, 0]));
            ops::leaky_relu_backward(&z.data, &mut g.data);
            let (gg, gb) = pair_mut(
                grads,
                self.layout.range(&format!("enc{s}.norm_res.gamma")),
                self.layout.range(&format!("enc{s}.norm_res.beta")),
            );
            let gc2 = ops::instance_norm_backward(
                &st.norm_res,
                self.p(params, &format!("enc{s}.norm_res.gamma")),
                &g,
                gg,
                gb,
            );
            let mut ga = ops::conv3d_backward(
                &st.a,
                self.p(params, &format!("enc{s}.conv_res.w")),
                &gc2,
                k,
                1,
                &mut grads[self.layout.range(&format!("enc{s}.conv_res.w"))],
                None,
                true,
            )
            .expect("input gradient requested");
            ga.add_assign(&g);
            ops::leaky_relu_backward(&st.a.data, &mut ga.data);
            let (gg, gb) = pair_mut(
                grads,
                self.layout.range(&format!("enc{s}.norm_in.gamma")),
                self.layout.range(&format!("enc{s}.norm_in.beta")),
            );
            let gc1 = ops::instance_norm_backward(
                &st.norm_in,
                self.p(params, &format!("enc{s}.norm_in.gamma")),
                &ga,
                gg,
                gb,
            );
            let x = self.stage_in(s, &tape.input, &features.stages);
            let gx = ops::conv3d_backward(
                x,
                self.p(params, &format!("enc{s}.conv_in.w")),
                &gc1,
                k,
                if s == 0 { 1 } else { 2 },
                &mut grads[self.layout.range(&format!("enc{s}.conv_in.w"))],
                None,
                s > 0,
            );
            if let Some(gx) = gx {
                grad_features[s - 1].add_assign(&gx);
            }
        }
    }

    // --------------------------------------------------------- prompt decoder

    pub fn prompt_decode<T: Real>(
        &self,
        params: &[T],
        q: &[T],
        bottleneck: &Field<T>,
    ) -> Result<GuidanceTensors<T>> {
        self.prompt_decode_with_tape(params, q, bottleneck).map(|(g, _)| g)
    }

    fn lin<T: Real>(&self, params: &[T], name: &str, x: &[T], rows: usize, d_in: usize, d_out: usize) -> Vec<T> {
        ops::linear(
            x,
            rows,
            self.p(params, &format!("{name}.w")),
            self.p(params, &format!("{name}.b")),
            d_in,
            d_out,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn lin_back<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        name: &str,
        x: &[T],
        rows: usize,
        gy: &[T],
        d_in: usize,
        d_out: usize,
    ) -> Vec<T> {
        let wn = format!("{name}.w");
        let (gw, gb) = pair_mut(grads, self.layout.range(&wn), self.layout.range(&format!("{name}.b")));
        ops::linear_backward(x, rows, self.p(params, &wn), gy, d_in, d_out, gw, gb)
    }

    pub fn prompt_decode_with_tape<T: Real>(
        &self,
        params: &[T],
        q: &[T],
        bottleneck: &Field<T>,
    ) -> Result<(GuidanceTensors<T>, PromptTape<T>)> {
        self.check_params(params)?;
        let cfg = &self.config;
        if q.len() != cfg.text_dim {
            return Err(shape_err!(
                "prompt embedding has dimension {}, network expects {}",
                q.len(),
                cfg.text_dim
            ));
        }
        let cb = cfg.channels[cfg.n_stages - 1];
        if bottleneck.channels != cb {
            return Err(shape_err!(
                "bottleneck has {} channels, expected {cb}",
                bottleneck.channels
            ));
        }
        let n = bottleneck.voxels();
        let mut guidance = GuidanceTensors::zeros(cfg);
        let mut tape = PromptTape {
            q_in: q.to_vec(),
            tokens: Vec::new(),
            n_tokens: n,
            mem: Vec::new(),
            layers: Vec::new(),
            x_out: Vec::new(),
            adapter_hidden: vec![None; cfg.n_stages - 1],
            active: cfg.text_pathway(),
        };
        if !tape.active {
            return Ok((guidance, tape));
        }
        if cfg.positional_tokens > 0 && cfg.positional_tokens != n {
            return Err(shape_err!(
                "bottleneck has {n} tokens, positions were learned for {}",
                cfg.positional_tokens
            ));
        }
        let dq = cfg.query_dim;
        let heads = cfg.prompt_decoder_heads;
        let dh = dq / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

        let mut x = self.lin(params, "prompt.query_proj", q, 1, cfg.text_dim, dq);
        let mut tokens = vec![T::zero(); n * cb];
        for c in 0..cb {
            for (v, &val) in bottleneck.channel(c).iter().enumerate() {
                tokens[v * cb + c] = val;
            }
        }
        let mut mem = self.lin(params, "prompt.memory_proj", &tokens, n, cb, dq);
        if cfg.positional_tokens > 0 {
            add_into(&mut mem, self.p(params, "prompt.positions"));
        }
        for l in 0..cfg.prompt_decoder_layers {
            let pre = format!("prompt.layer{l}");
            let qv = self.lin(params, &format!("{pre}.attn.q"), &x, 1, dq, dq);
            let kv = self.lin(params, &format!("{pre}.attn.k"), &mem, n, dq, dq);
            let vv = self.lin(params, &format!("{pre}.attn.v"), &mem, n, dq, dq);
            let mut attn = vec![T::zero(); heads * n];
            let mut o = vec![T::zero(); dq];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let a = &mut attn[h * n..(h + 1) * n];
                for (t, av) in a.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for j in cols.clone() {
                        s += qv[j] * kv[t * dq + j];
                    }
                    *av = s * scale;
                }
                let max = a.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for av in a.iter_mut() {
                    *av = (*av - max).exp();
                    sum += *av;
                }
                for av in a.iter_mut() {
                    *av /= sum;
                }
                for (t, &av) in a.iter().enumerate() {
                    for j in cols.clone() {
                        o[j] += av * vv[t * dq + j];
                    }
                }
            }
            let ao = self.lin(params, &format!("{pre}.attn.o"), &o, 1, dq, dq);
            let r1: Vec<T> = x.iter().zip(&ao).map(|(&a, &b)| a + b).collect();
            let (x1, ln1) = ops::layer_norm(
                &r1,
                self.p(params, &format!("{pre}.norm1.gamma")),
                self.p(params, &format!("{pre}.norm1.beta")),
            );
            let mut h = self.lin(params, &format!("{pre}.ffn1"), &x1, 1, dq, cfg.ffn_hidden);
            ops::leaky_relu(&mut h);
            let f = self.lin(params, &format!("{pre}.ffn2"), &h, 1, cfg.ffn_hidden, dq);
            let r2: Vec<T> = x1.iter().zip(&f).map(|(&a, &b)| a + b).collect();
            let (x2, ln2) = ops::layer_norm(
                &r2,
                self.p(params, &format!("{pre}.norm2.gamma")),
                self.p(params, &format!("{pre}.norm2.beta")),
            );
            tape.layers.push(LayerTape {
                x_in: std::mem::replace(&mut x, x2),
                q: qv,
                k: kv,
                v: vv,
                attn,
                o,
                ln1,
                x1,
                h,
                ln2,
            });
        }
        for s in 0..cfg.n_stages - 1 {
            if !cfg.fused_at(s) {
                continue;
            }
            let mut hh = self.lin(params, &format!("adapter{s}.fc1"), &x, 1, dq, cfg.adapter_hidden);
            ops::leaky_relu(&mut hh);
            let out = cfg.guidance_dim * cfg.channels[s];
            guidance.tensors[s] = self.lin(params, &format!("adapter{s}.fc2"), &hh, 1, cfg.adapter_hidden, out);
            tape.adapter_hidden[s] = Some(hh);
        }
        tape.tokens = tokens;
        tape.mem = mem;
        tape.x_out = x;
        if !guidance.all_finite() {
            return Err(Error::NonFinite {
                what: "guidance tensor",
                scale: None,
            });
        }
        Ok((guidance, tape))
    }

    /// Accumulates parameter gradients; returns the bottleneck gradient.
    pub fn prompt_backward<T: Real>(
        &self,
        params: &[T],
        tape: &PromptTape<T>,
        grad_guidance: &[Vec<T>],
        grads: &mut [T],
    ) -> Option<Field<T>> {
        if !tape.active {
            return None;
        }
        let cfg = &self.config;
        let dq = cfg.query_dim;
        let n = tape.n_tokens;
        let cb = cfg.channels[cfg.n_stages - 1];
        let heads = cfg.prompt_decoder_heads;
        let dh = dq / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

        let mut gx = vec![T::zero(); dq];
        for s in 0..cfg.n_stages - 1 {
            let Some(hh) = &tape.adapter_hidden[s] else {
                continue;
            };
            let out = cfg.guidance_dim * cfg.channels[s];
            let mut gh = self.lin_back(
                params,
                grads,
                &format!("adapter{s}.fc2"),
                hh,
                1,
                &grad_guidance[s],
                cfg.adapter_hidden,
                out,
            );
            ops::leaky_relu_backward(hh, &mut gh);
            let g = self.lin_back(params, grads, &format!("adapter{s}.fc1"), &tape.x_out, 1, &gh, dq, cfg.adapter_hidden);
            add_into(&mut gx, &g);
        }
        let mut gmem = vec![T::zero(); n * dq];
        for l in (0..cfg.prompt_decoder_layers).rev() {
            let lt = &tape.layers[l];
            let pre = format!("prompt.layer{l}");
            let (gg, gb) = pair_mut(
                grads,
                self.layout.range(&format!("{pre}.norm2.gamma")),
                self.layout.range(&format!("{pre}.norm2.beta")),
            );
            let gr2 = ops::layer_norm_backward(&lt.ln2, self.p(params, &format!("{pre}.norm2.gamma")), &gx, gg, gb);
            let mut gh = self.lin_back(params, grads, &format!("{pre}.ffn2"), &lt.h, 1, &gr2, cfg.ffn_hidden, dq);
            ops::leaky_relu_backward(&lt.h, &mut gh);
            let mut gx1 = self.lin_back(params, grads, &format!("{pre}.ffn1"), &lt.x1, 1, &gh, dq, cfg.ffn_hidden);
            add_into(&mut gx1, &gr2);
            let (gg, gb) = pair_mut(
                grads,
                self.layout.range(&format!("{pre}.norm1.gamma")),
                self.layout.range(&format!("{pre}.norm1.beta")),
            );
            let gr1 = ops::layer_norm_backward(&lt.ln1, self.p(params, &format!("{pre}.norm1.gamma")), &gx1, gg, gb);
            let go = self.lin_back(params, grads, &format!("{pre}.attn.o"), &lt.o, 1, &gr1, dq, dq);
            let mut gq = vec![T::zero(); dq];
            let mut gk = vec![T::zero(); n * dq];
            let mut gv = vec![T::zero(); n * dq];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let a = &lt.attn[h * n..(h + 1) * n];
                let mut ga = vec![T::zero(); n];
                for t in 0..n {
                    let mut acc = T::zero();
                    for j in cols.clone() {
                        acc += go[j] * lt.v[t * dq + j];
                        gv[t * dq + j] += a[t] * go[j];
                    }
                    ga[t] = acc;
                }
                let dot: T = a.iter().zip(&ga).map(|(&x, &y)| x * y).sum();
                for t in 0..n {
                    let gs = a[t] * (ga[t] - dot) * scale;
                    for j in cols.clone() {
                        gq[j] += gs * lt.k[t * dq + j];
                        gk[t * dq + j] += gs * lt.q[j];
                    }
                }
            }
            let mut gxin = self.lin_back(params, grads, &format!("{pre}.attn.q"), &lt.x_in, 1, &gq, dq, dq);
            add_into(&mut gxin, &gr1);
            let g1 = self.lin_back(params, grads, &format!("{pre}.attn.k"), &tape.mem, n, &gk, dq, dq);
            let g2 = self.lin_back(params, grads, &format!("{pre}.attn.v"), &tape.mem, n, &gv, dq, dq);
            add_into(&mut gmem, &g1);
            add_into(&mut gmem, &g2);
            gx = gxin;
        }
        if cfg.positional_tokens > 0 {
            add_into(&mut grads[self.layout.range("prompt.positions")], &gmem);
        }
        let gtok = self.lin_back(params, grads, "prompt.memory_proj", &tape.tokens, n, &gmem, cb, dq);
        self.lin_back(params, grads, "prompt.query_proj", &tape.q_in, 1, &gx, cfg.text_dim, dq);
        let mut gb = vec![T::zero(); cb * n];
        for v in 0..n {
            for c in 0..cb {
                gb[c * n + v] = gtok[v * cb + c];
            }
        }
        Some(Field {
            channels: cb,
            dims: [0, 0, 0],
            data: gb,
        })
    }

    // ---------------------------------------------------------------- decoder

    pub fn decode<T: Real>(
        &self,
        params: &[T],
        features: &MultiScaleFeatures<T>,
        guidance: &GuidanceTensors<T>,
    ) -> Result<PredictionBundle<T>> {
        self.decode_with_tape(params, features, guidance).map(|(b, _)| b)
    }

    fn check_features<T: Real>(&self, features: &MultiScaleFeatures<T>, guidance: &GuidanceTensors<T>) -> Result<()> {
        let cfg = &self.config;
        if features.stages.len() != cfg.n_stages {
            return Err(shape_err!(
                "{} feature stages for a {}-stage network",
                features.stages.len(),
                cfg.n_stages
            ));
        }
        let base = features.stages[0].dims;
        for (s, f) in features.stages.iter().enumerate() {
            if f.channels != cfg.channels[s] || f.dims != cfg.stage_dims(base, s) {
                return Err(shape_err!(
                    "stage {s} features are {}x{:?}",
                    f.channels,
                    f.dims
                ));
            }
        }
        if guidance.guidance_dim != cfg.guidance_dim || guidance.tensors.len() != cfg.n_stages - 1 {
            return Err(shape_err!("guidance does not match the network configuration"));
        }
        for (s, t) in guidance.tensors.iter().enumerate() {
            if t.len() != cfg.guidance_dim * cfg.channels[s] {
                return Err(shape_err!("guidance tensor {s} has {} values", t.len()));
            }
        }
        Ok(())
    }

    pub fn decode_with_tape<T: Real>(
        &self,
        params: &[T],
        features: &MultiScaleFeatures<T>,
        guidance: &GuidanceTensors<T>,
    ) -> Result<(PredictionBundle<T>, DecoderTape<T>)> {
        self.check_params(params)?;
        self.check_features(features, guidance)?;
        let cfg = &self.config;
        let k = cfg.conv_kernel;
        let last = cfg.n_stages - 1;
        let mut stages: Vec<Option<DecStageTape<T>>> = (0..last).map(|_| None).collect();
        for s in (0..last).rev() {
            let c = cfg.channels[s];
            let prev = if s + 1 == last {
                &features.stages[last]
            } else {
                stages[s + 1].as_ref().expect("coarser stage done").out()
            };
            let up = ops::tconv3d(
                prev,
                self.p(params, &format!("dec{s}.up.w")),
                self.p(params, &format!("dec{s}.up.b")),
                c,
            );
            let cat = Field::concat(&up, &features.stages[s])?;
            let conv = ops::conv3d(&cat, self.p(params, &format!("dec{s}.conv.w")), None, c, k, 1);
            let (mut zprime, norm) = ops::instance_norm(
                &conv,
                self.p(params, &format!("dec{s}.norm.gamma")),
                self.p(params, &format!("dec{s}.norm.beta")),
            );
            ops::leaky_relu(&mut zprime.data);
            let fused = (cfg.guidance_dim > 0 && cfg.fused_at(s))
                .then(|| ops::fuse_channels(&zprime, &guidance.tensors[s], cfg.guidance_dim));
            stages[s] = Some(DecStageTape {
                cat,
                norm,
                zprime,
                fused,
            });
        }
        let stages: Vec<DecStageTape<T>> = stages.into_iter().map(|s| s.expect("filled")).collect();
        let mut logits = Vec::new();
        for s in cfg.head_scales() {
            logits.push(ops::conv3d(
                stages[s].out(),
                self.p(params, &format!("head{s}.w")),
                Some(self.p(params, &format!("head{s}.b"))),
                1,
                1,
                1,
            ));
        }
        Ok((PredictionBundle { logits }, DecoderTape { stages }))
    }

    /// Accumulates parameter gradients; returns gradients of the features and
    /// of the guidance tensors.
    pub fn decode_backward<T: Real>(
        &self,
        params: &[T],
        features: &MultiScaleFeatures<T>,
        guidance: &GuidanceTensors<T>,
        tape: &DecoderTape<T>,
        grad_logits: &[Field<T>],
        grads: &mut [T],
    ) -> (Vec<Field<T>>, Vec<Vec<T>>) {
        let cfg = &self.config;
        let k = cfg.conv_kernel;
        let last = cfg.n_stages - 1;
        let mut gfeat: Vec<Field<T>> = features
            .stages
            .iter()
            .map(|f| Field::zeros(f.channels, f.dims))
            .collect();
        let mut gguid: Vec<Vec<T>> = guidance.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
        let mut gy: Vec<Option<Field<T>>> = (0..last).map(|_| None).collect();
        for (i, s) in cfg.head_scales().into_iter().enumerate() {
            let (gw, gb) = pair_mut(
                grads,
                self.layout.range(&format!("head{s}.w")),
                self.layout.range(&format!("head{s}.b")),
            );
            let g = ops::conv3d_backward(
                tape.stages[s].out(),
                self.p(params, &format!("head{s}.w")),
                &grad_logits[i],
                1,
                1,
                gw,
                Some(gb),
                true,
            )
            .expect("input gradient requested");
            gy[s] = Some(g);
        }
        for s in 0..last {
            let st = &tape.stages[s];
            let g = gy[s].take().expect("every decoder stage feeds the output");
            let mut gz = match &st.fused {
                Some(_) => ops::fuse_channels_backward(&st.zprime, &guidance.tensors[s], &g, &mut gguid[s]),
                None => g,
            };
            ops::leaky_relu_backward(&st.zprime.data, &mut gz.data);
            let (gg, gb) = pair_mut(
                grads,
                self.layout.range(&format!("dec{s}.norm.gamma")),
                self.layout.range(&format!("dec{s}.norm.beta")),
            );
            let gconv = ops::instance_norm_backward(&st.norm, self.p(params, &format!("dec{s}.norm.gamma")), &gz, gg, gb);
            let gcat = ops::conv3d_backward(
                &st.cat,
                self.p(params, &format!("dec{s}.conv.w")),
                &gconv,
                k,
                1,
                &mut grads[self.layout.range(&format!("dec{s}.conv.w"))],
                None,
                true,
            )
            .expect("input gradient requested");
            let (gup, gskip) = gcat.split(cfg.channels[s]);
            gfeat[s].add_assign(&gskip);
            let prev = if s + 1 == last {
                &features.stages[last]
            } else {
                tape.stages[s + 1].out()
            };
            let (gw, gb) = pair_mut(
                grads,
                self.layout.range(&format!("dec{s}.up.w")),
                self.layout.range(&format!("dec{s}.up.b")),
            );
            let gprev = ops::tconv3d_backward(prev, self.p(params, &format!("dec{s}.up.w")), &gup, gw, gb);
            if s + 1 == last {
                gfeat[last].add_assign(&gprev);
            } else {
                match gy[s + 1].as_mut() {
                    Some(acc) => acc.add_assign(&gprev),
                    None => gy[s + 1] = Some(gprev),
                }
            }
        }
        (gfeat, gguid)
    }

    // ------------------------------------------------------------ composition

    pub fn forward<T: Real>(&self, params: &[T], volume: &Field<T>, q: &[T]) -> Result<PredictionBundle<T>> {
        let features = self.encode(params, volume)?;
        let guidance = self.prompt_decode(params, q, &features.stages[self.config.n_stages - 1])?;
        self.decode(params, &features, &guidance)
    }

    /// Mean deep-supervision loss over every (image, prompt) pair.
    pub fn loss<T: Real>(&self, params: &[T], batch: &[ImageExample<'_, T>], weights: &LossWeights) -> Result<f64> {
        let pairs: usize = batch.iter().map(|b| b.prompts.len()).sum();
        if pairs == 0 {
            return Err(Error::InvalidInput("batch has no prompts".into()));
        }
        let last = self.config.n_stages - 1;
        let mut total = 0.0;
        for ex in batch {
            let features = self.encode(params, ex.volume)?;
            for pr in &ex.prompts {
                let guidance = self.prompt_decode(params, pr.embedding, &features.stages[last])?;
                let bundle = self.decode(params, &features, &guidance)?;
                total += crate::loss::deep_supervision_loss(&bundle.logits, pr.targets, weights)?;
            }
        }
        Ok(total / pairs as f64)
    }

    /// Mean deep-supervision loss over every (image, prompt) pair, with its
    /// gradient accumulated into `grads`. Each image is encoded once.
    pub fn loss_and_grad<T: Real>(
        &self,
        params: &[T],
        batch: &[ImageExample<'_, T>],
        weights: &LossWeights,
        grads: &mut [T],
    ) -> Result<BatchLoss> {
        self.check_params(params)?;
        if grads.len() != params.len() {
            return Err(shape_err!("gradient buffer has {} entries", grads.len()));
        }
        let pairs: usize = batch.iter().map(|b| b.prompts.len()).sum();
        if pairs == 0 {
            return Err(Error::InvalidInput("batch has no prompts".into()));
        }
        let inv = 1.0 / pairs as f64;
        let last = self.config.n_stages - 1;
        let mut out = BatchLoss {
            loss: 0.0,
            pair_losses: Vec::with_capacity(pairs),
            per_scale: Vec::new(),
        };
        let mut scale_sums = vec![(0.0, 0.0); self.config.bundle_len()];
        for ex in batch {
            let (features, enc_tape) = self.encode_with_tape(params, ex.volume)?;
            let mut gfeat: Vec<Field<T>> = features
                .stages
                .iter()
                .map(|f| Field::zeros(f.channels, f.dims))
                .collect();
            for pr in &ex.prompts {
                let (guidance, ptape) = self.prompt_decode_with_tape(params, pr.embedding, &features.stages[last])?;
                let (bundle, dtape) = self.decode_with_tape(params, &features, &guidance)?;
                let ds = deep_supervision_with_grad(&bundle.logits, pr.targets, weights, inv)?;
                out.loss += ds.total * inv;
                out.pair_losses.push(ds.total);
                for (acc, l) in scale_sums.iter_mut().zip(&ds.per_scale) {
                    acc.0 += l.dice * inv;
                    acc.1 += l.bce * inv;
                }
                let (gf, gg) = self.decode_backward(params, &features, &guidance, &dtape, &ds.grads, grads);
                for (a, b) in gfeat.iter_mut().zip(&gf) {
                    a.add_assign(b);
                }
                if let Some(gb) = self.prompt_backward(params, &ptape, &gg, grads) {
                    add_into(&mut gfeat[last].data, &gb.data);
                }
            }
            self.encode_backward(params, &features, &enc_tape, gfeat, grads);
        }
        out.per_scale = scale_sums
            .into_iter()
            .map(|(dice, bce)| SegLoss { dice, bce })
            .collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter gradient",
                scale: None,
            });
        }
        Ok(out)
    }
}
