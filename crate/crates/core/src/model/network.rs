use super::arch::{conv_out, needs_projection, Activation, ArchConfig, OutputKind};
use super::params::{GradVector, ModelParams, Segment};
use super::real::Real;
use crate::data::{Image, ImageDims};
use crate::error::{Error, Result};

#[inline]
fn act<T: Real>(a: Activation, x: T) -> T {
    match a {
        Activation::Elu => {
            if x > T::zero() {
                x
            } else {
                x.exp_m1()
            }
        }
        Activation::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
    }
}

/// Derivative of `act` evaluated at the pre-activation `x`.
#[inline]
fn act_grad<T: Real>(a: Activation, x: T) -> T {
    match a {
        Activation::Elu => {
            if x > T::zero() {
                T::one()
            } else {
                x.exp()
            }
        }
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

fn act_vec<T: Real>(a: Activation, xs: &[T]) -> Vec<T> {
    xs.iter().map(|&x| act(a, x)).collect()
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn check_finite<T: Real>(xs: &[T], layer: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvPlan {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvPlan {
    fn new(name: String, cin: usize, cout: usize, k: usize, stride: usize, h_in: usize, w_in: usize, offset: usize) -> Self {
        Self {
            name,
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            h_in,
            w_in,
            h_out: conv_out(h_in, k, stride),
            w_out: conv_out(w_in, k, stride),
            w_off: offset,
            b_off: offset + k * k * cin * cout,
        }
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn n_out(&self) -> usize {
        self.h_out * self.w_out
    }

    fn out_len(&self) -> usize {
        self.cout * self.n_out()
    }

    fn in_len(&self) -> usize {
        self.cin * self.h_in * self.w_in
    }

    fn end(&self) -> usize {
        self.b_off + self.cout
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn segments(&self, layer: &str, out: &mut Vec<Segment>) {
        out.push(Segment {
            name: format!("{}.weight", self.name),
            layer: layer.to_string(),
            offset: self.w_off,
            len: self.b_off - self.w_off,
            fan_in: self.kdim(),
        });
        out.push(Segment {
            name: format!("{}.bias", self.name),
            layer: layer.to_string(),
            offset: self.b_off,
            len: self.cout,
            fan_in: 0,
        });
    }

    fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let n = self.n_out();
        let mut cols = vec![T::zero(); self.kdim() * n];
        for ci in 0..self.cin {
            let plane = &input[ci * self.h_in * self.w_in..(ci + 1) * self.h_in * self.w_in];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for y in 0..self.h_out {
                        let iy = (y * self.stride + kh) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h_in as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w_in..(iy as usize + 1) * self.w_in];
                        let d = &mut dst[y * self.w_out..(y + 1) * self.w_out];
                        for (x, slot) in d.iter_mut().enumerate() {
                            let ix = (x * self.stride + kw) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w_in as isize {
                                *slot = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adds the column gradient back onto the input gradient.
    fn col2im<T: Real>(&self, cols: &[T], dinput: &mut [T]) {
        let n = self.n_out();
        for ci in 0..self.cin {
            let plane = &mut dinput[ci * self.h_in * self.w_in..(ci + 1) * self.h_in * self.w_in];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let src = &cols[row * n..(row + 1) * n];
                    for y in 0..self.h_out {
                        let iy = (y * self.stride + kh) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h_in as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w_in..(iy as usize + 1) * self.w_in];
                        for x in 0..self.w_out {
                            let ix = (x * self.stride + kw) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w_in as isize {
                                dst[ix as usize] += src[y * self.w_out + x];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Real>(&self, params: &[T], input: &[T]) -> Vec<T> {
        debug_assert_eq!(input.len(), self.in_len());
        let n = self.n_out();
        let mut out = vec![T::zero(); self.out_len()];
        for (co, row) in out.chunks_exact_mut(n).enumerate() {
            row.fill(params[self.b_off + co]);
        }
        let w = &params[self.w_off..self.b_off];
        if self.is_pointwise() {
            T::gemm(self.cout, self.kdim(), n, T::one(), w, false, input, false, T::one(), &mut out);
        } else {
            let cols = self.im2col(input);
            T::gemm(self.cout, self.kdim(), n, T::one(), w, false, &cols, false, T::one(), &mut out);
        }
        out
    }

    /// Accumulates weight/bias gradients and, when asked, the input
    /// gradient.
    fn backward<T: Real>(&self, params: &[T], input: &[T], dout: &[T], grads: &mut [T], dinput: Option<&mut [T]>) {
        let n = self.n_out();
        let kd = self.kdim();
        for (co, row) in dout.chunks_exact(n).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            grads[self.b_off + co] += s;
        }
        let w = &params[self.w_off..self.b_off];
        if self.is_pointwise() {
            T::gemm(self.cout, n, kd, T::one(), dout, false, input, true, T::one(), &mut grads[self.w_off..self.b_off]);
            if let Some(di) = dinput {
                T::gemm(kd, self.cout, n, T::one(), w, true, dout, false, T::one(), di);
            }
        } else {
            let cols = self.im2col(input);
            T::gemm(self.cout, n, kd, T::one(), dout, false, &cols, true, T::one(), &mut grads[self.w_off..self.b_off]);
            if let Some(di) = dinput {
                let mut dcols = vec![T::zero(); kd * n];
                T::gemm(kd, self.cout, n, T::one(), w, true, dout, false, T::zero(), &mut dcols);
                self.col2im(&dcols, di);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockPlan {
    pub name: String,
    pub conv1: ConvPlan,
    pub conv2: ConvPlan,
    pub proj: Option<ConvPlan>,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub(crate) struct DensePlan {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl DensePlan {
    fn forward<T: Real>(&self, params: &[T], x: &[T]) -> Vec<T> {
        (0..self.dout)
            .map(|o| {
                let w = &params[self.w_off + o * self.din..self.w_off + (o + 1) * self.din];
                let mut s = params[self.b_off + o];
                for (a, b) in w.iter().zip(x) {
                    s += *a * *b;
                }
                s
            })
            .collect()
    }

    fn backward<T: Real>(&self, params: &[T], x: &[T], dz: &[T], grads: &mut [T]) -> Vec<T> {
        let mut dx = vec![T::zero(); self.din];
        for (o, &g) in dz.iter().enumerate() {
            grads[self.b_off + o] += g;
            let row = self.w_off + o * self.din;
            for i in 0..self.din {
                grads[row + i] += g * x[i];
                dx[i] += g * params[row + i];
            }
        }
        dx
    }
}

/// Execution plan derived from an [`ArchConfig`]: shapes and parameter
/// offsets of every layer.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub input: ImageDims,
    pub stem: ConvPlan,
    pub blocks: Vec<BlockPlan>,
    pub final_act: Activation,
    pub hidden: Vec<DensePlan>,
    pub head_act: Activation,
    pub out: DensePlan,
    pub output: OutputKind,
    pub n_params: usize,
    pub segments: Vec<Segment>,
}

impl Plan {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut segments = Vec::new();
        let (h, w) = (arch.input.height, arch.input.width);
        let stem = ConvPlan::new("stem".into(), arch.input.channels, arch.stem.filters, arch.stem.kernel, arch.stem.stride, h, w, 0);
        stem.segments("stem", &mut segments);
        let mut offset = stem.end();
        let (mut c, mut h, mut w) = (stem.cout, stem.h_out, stem.w_out);
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for (i, b) in arch.blocks.iter().enumerate() {
            let name = format!("block{}", i + 1);
            let conv1 = ConvPlan::new(format!("{name}.conv1"), c, b.filters, b.kernel, b.stride, h, w, offset);
            conv1.segments(&name, &mut segments);
            offset = conv1.end();
            let conv2 = ConvPlan::new(format!("{name}.conv2"), b.filters, b.filters, b.kernel, 1, conv1.h_out, conv1.w_out, offset);
            conv2.segments(&name, &mut segments);
            offset = conv2.end();
            let proj = if needs_projection(c, b) {
                let p = ConvPlan::new(format!("{name}.proj"), c, b.filters, 1, b.stride, h, w, offset);
                p.segments(&name, &mut segments);
                offset = p.end();
                debug_assert_eq!((p.h_out, p.w_out), (conv1.h_out, conv1.w_out));
                Some(p)
            } else {
                None
            };
            c = b.filters;
            h = conv1.h_out;
            w = conv1.w_out;
            blocks.push(BlockPlan {
                name,
                conv1,
                conv2,
                proj,
                act: b.activation,
            });
        }
        let mut dense = |name: String, din: usize, dout: usize, offset: &mut usize| {
            let d = DensePlan {
                name: name.clone(),
                din,
                dout,
                w_off: *offset,
                b_off: *offset + din * dout,
            };
            segments.push(Segment {
                name: format!("{name}.weight"),
                layer: name.clone(),
                offset: d.w_off,
                len: din * dout,
                fan_in: din,
            });
            segments.push(Segment {
                name: format!("{name}.bias"),
                layer: name,
                offset: d.b_off,
                len: dout,
                fan_in: 0,
            });
            *offset = d.b_off + dout;
            d
        };
        let mut hidden = Vec::new();
        let mut din = c;
        for (i, &width) in arch.head.hidden.iter().enumerate() {
            hidden.push(dense(format!("dense{}", i + 1), din, width, &mut offset));
            din = width;
        }
        let out = dense("output".into(), din, 1, &mut offset);
        debug_assert_eq!(offset, arch.param_count());
        Ok(Self {
            input: arch.input,
            stem,
            final_act: arch.blocks.last().expect("validated").activation,
            blocks,
            hidden,
            head_act: arch.head.activation,
            out,
            output: arch.head.output,
            n_params: offset,
            segments,
        })
    }

    fn stage_index(&self, layer: &str) -> Result<usize> {
        if layer == "stem" {
            return Ok(0);
        }
        if let Some(i) = layer.strip_prefix("block").and_then(|s| s.parse::<usize>().ok()) {
            if (1..=self.blocks.len()).contains(&i) {
                return Ok(i);
            }
        }
        if layer == "output" || self.hidden.iter().any(|d| d.name == layer) {
            return Err(Error::UnsupportedLayer(layer.to_string()));
        }
        Err(Error::UnknownLayer(layer.to_string()))
    }

    fn stage_shape(&self, stage: usize) -> (usize, usize, usize) {
        if stage == 0 {
            (self.stem.cout, self.stem.h_out, self.stem.w_out)
        } else {
            let c = &self.blocks[stage - 1].conv2;
            (c.cout, c.h_out, c.w_out)
        }
    }

    fn stage_act(&self, stage: usize) -> Activation {
        // The maps of stage k are consumed through the next block's
        // activation, or the final activation for the last stage.
        self.blocks.get(stage).map(|b| b.act).unwrap_or(self.final_act)
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct FrameCache<T> {
    input: Vec<T>,
    /// Stage outputs `S_0..S_K`.
    stages: Vec<Vec<T>>,
    /// Pre-activation output of each block's first convolution.
    h1: Vec<Vec<T>>,
    pooled: Vec<T>,
    dense_pre: Vec<Vec<T>>,
    out_pre: T,
    pub output: T,
}

impl<T: Real> FrameCache<T> {
    /// Bytes held by this cache.
    #[cfg(test)]
    pub fn bytes(&self) -> usize {
        let floats = self.input.len()
            + self.stages.iter().map(Vec::len).sum::<usize>()
            + self.h1.iter().map(Vec::len).sum::<usize>()
            + self.pooled.len()
            + self.dense_pre.iter().map(Vec::len).sum::<usize>()
            + 2;
        floats * std::mem::size_of::<T>()
    }
}

/// Spatial maps of one layer, each `height x width` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub height: usize,
    pub width: usize,
    pub maps: Vec<Vec<f64>>,
}

impl FeatureMaps {
    fn from_flat<T: Real>(flat: &[T], c: usize, h: usize, w: usize) -> Self {
        Self {
            height: h,
            width: w,
            maps: (0..c)
                .map(|i| flat[i * h * w..(i + 1) * h * w].iter().map(|v| v.f64()).collect())
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.maps.len()
    }
}

/// Stage maps together with the gradient of the output with respect to
/// them.
#[derive(Debug, Clone)]
pub struct StageGrad {
    pub maps: FeatureMaps,
    pub grads: FeatureMaps,
    pub output: f64,
}

/// Evaluator for one architecture. Holds no parameters; every call takes
/// them explicitly so one network can serve many parameter vectors.
#[derive(Debug, Clone)]
pub struct Network {
    arch: ArchConfig,
    plan: Plan,
}

impl Network {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        Ok(Self {
            arch: arch.clone(),
            plan: Plan::new(arch)?,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.plan.n_params
    }

    pub fn segments(&self) -> &[Segment] {
        &self.plan.segments
    }

    /// Layer owning parameter index `i`.
    pub fn layer_of(&self, i: usize) -> &str {
        self.plan
            .segments
            .iter()
            .find(|s| s.range().contains(&i))
            .map(|s| s.layer.as_str())
            .unwrap_or("?")
    }

    fn check_params<T: Real>(&self, params: &ModelParams<T>) -> Result<()> {
        if params.len() != self.plan.n_params {
            return Err(Error::Dimension(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.plan.n_params
            )));
        }
        Ok(())
    }

    fn input_of<T: Real>(&self, image: &Image) -> Result<Vec<T>> {
        if image.dims() != self.plan.input {
            let d = image.dims();
            let e = self.plan.input;
            return Err(Error::Dimension(format!(
                "image is {}x{}x{}, network expects {}x{}x{}",
                d.channels, d.height, d.width, e.channels, e.height, e.width
            )));
        }
        Ok(image.pixels().iter().map(|&p| T::of(p as f64)).collect())
    }

    /// Runs the trunk from stage `start` (whose output is `maps`) to the
    /// end, filling the cache.
    fn run_from<T: Real>(&self, p: &[T], start: usize, maps: Vec<T>, cache: &mut FrameCache<T>) -> Result<()> {
        cache.stages.truncate(start);
        cache.h1.truncate(start);
        cache.stages.push(maps);
        for (bi, b) in self.plan.blocks.iter().enumerate().skip(start) {
            let x = &cache.stages[bi];
            let a = act_vec(b.act, x);
            let h1 = b.conv1.forward(p, &a);
            let bact = act_vec(b.act, &h1);
            let mut s = b.conv2.forward(p, &bact);
            match &b.proj {
                Some(pr) => {
                    let sc = pr.forward(p, &a);
                    s.iter_mut().zip(&sc).for_each(|(o, v)| *o += *v);
                }
                None => s.iter_mut().zip(x).for_each(|(o, v)| *o += *v),
            }
            check_finite(&s, &b.name)?;
            cache.h1.push(h1);
            cache.stages.push(s);
        }
        let (c, h, w) = self.plan.stage_shape(self.plan.blocks.len());
        let last = cache.stages.last().expect("at least one stage");
        let inv = T::of(1.0 / (h * w) as f64);
        cache.pooled = (0..c)
            .map(|ch| {
                let mut s = T::zero();
                for &v in &last[ch * h * w..(ch + 1) * h * w] {
                    s += act(self.plan.final_act, v);
                }
                s * inv
            })
            .collect();
        cache.dense_pre.clear();
        let mut x = cache.pooled.clone();
        for d in &self.plan.hidden {
            let pre = d.forward(p, &x);
            check_finite(&pre, &d.name)?;
            x = act_vec(self.plan.head_act, &pre);
            cache.dense_pre.push(pre);
        }
        let out_pre = self.plan.out.forward(p, &x)[0];
        cache.out_pre = out_pre;
        cache.output = match self.plan.output {
            OutputKind::Linear => out_pre,
            OutputKind::Softplus => softplus(out_pre),
        };
        check_finite(&[cache.output], "output")
    }

    pub(crate) fn forward_cached<T: Real>(&self, params: &ModelParams<T>, image: &Image) -> Result<FrameCache<T>> {
        self.check_params(params)?;
        let input = self.input_of::<T>(image)?;
        let p = params.values();
        let s0 = self.plan.stem.forward(p, &input);
        check_finite(&s0, "stem")?;
        let mut cache = FrameCache {
            input,
            stages: Vec::with_capacity(self.plan.blocks.len() + 1),
            h1: Vec::with_capacity(self.plan.blocks.len()),
            pooled: Vec::new(),
            dense_pre: Vec::new(),
            out_pre: T::zero(),
            output: T::zero(),
        };
        self.run_from(p, 0, s0, &mut cache)?;
        Ok(cache)
    }

    /// Reverse pass seeded with `seed = d(objective)/d(output)`.
    /// Parameter gradients are added into `grads`; if `capture` names a
    /// stage, the gradient with respect to that stage's output is returned.
    pub(crate) fn backward<T: Real>(
        &self,
        params: &ModelParams<T>,
        cache: &FrameCache<T>,
        seed: T,
        grads: &mut [T],
        capture: Option<usize>,
    ) -> Result<Option<Vec<T>>> {
        let p = params.values();
        let plan = &self.plan;
        let dout = match plan.output {
            OutputKind::Linear => seed,
            OutputKind::Softplus => seed * sigmoid(cache.out_pre),
        };
        let last_x = match (plan.hidden.len(), cache.dense_pre.last()) {
            (0, _) | (_, None) => cache.pooled.clone(),
            (_, Some(pre)) => act_vec(plan.head_act, pre),
        };
        let mut dx = plan.out.backward(p, &last_x, &[dout], grads);
        for (i, d) in plan.hidden.iter().enumerate().rev() {
            let pre = &cache.dense_pre[i];
            let dz: Vec<T> = dx.iter().zip(pre).map(|(&g, &z)| g * act_grad(plan.head_act, z)).collect();
            let x_in = if i == 0 {
                cache.pooled.clone()
            } else {
                act_vec(plan.head_act, &cache.dense_pre[i - 1])
            };
            dx = d.backward(p, &x_in, &dz, grads);
        }

        let k = plan.blocks.len();
        let (c, h, w) = plan.stage_shape(k);
        let inv = T::of(1.0 / (h * w) as f64);
        let last = &cache.stages[k];
        let mut ds: Vec<T> = (0..c * h * w)
            .map(|i| dx[i / (h * w)] * inv * act_grad(plan.final_act, last[i]))
            .collect();
        let mut captured = None;

        for bi in (0..k).rev() {
            if capture == Some(bi + 1) {
                captured = Some(ds.clone());
            }
            let b = &plan.blocks[bi];
            let x = &cache.stages[bi];
            let a = act_vec(b.act, x);
            let h1 = &cache.h1[bi];
            let bact = act_vec(b.act, h1);
            let mut dbact = vec![T::zero(); bact.len()];
            b.conv2.backward(p, &bact, &ds, grads, Some(&mut dbact));
            let dh1: Vec<T> = dbact.iter().zip(h1).map(|(&g, &z)| g * act_grad(b.act, z)).collect();
            let mut da = vec![T::zero(); a.len()];
            b.conv1.backward(p, &a, &dh1, grads, Some(&mut da));
            if let Some(pr) = &b.proj {
                pr.backward(p, &a, &ds, grads, Some(&mut da));
            }
            let mut dx: Vec<T> = da.iter().zip(x).map(|(&g, &z)| g * act_grad(b.act, z)).collect();
            if b.proj.is_none() {
                dx.iter_mut().zip(&ds).for_each(|(o, v)| *o += *v);
            }
            ds = dx;
        }
        if capture == Some(0) {
            captured = Some(ds.clone());
        }
        plan.stem.backward(p, &cache.input, &ds, grads, None);
        Ok(captured)
    }

    pub fn forward<T: Real>(&self, params: &ModelParams<T>, image: &Image) -> Result<T> {
        Ok(self.forward_cached(params, image)?.output)
    }

    /// Order-preserving batch evaluation.
    pub fn forward_batch<T: Real>(&self, params: &ModelParams<T>, images: &[&Image]) -> Result<Vec<T>> {
        images.iter().map(|im| self.forward(params, im)).collect()
    }

    /// Gradient of the output for one image into a caller-provided buffer
    /// (zeroed first). Returns the output.
    pub(crate) fn grad_into<T: Real>(&self, params: &ModelParams<T>, image: &Image, buf: &mut [T]) -> Result<T> {
        let cache = self.forward_cached(params, image)?;
        buf.iter_mut().for_each(|v| *v = T::zero());
        self.backward(params, &cache, T::one(), buf, None)?;
        self.check_grad(buf)?;
        Ok(cache.output)
    }

    /// Finite-check of a gradient buffer, naming the first offending layer.
    pub(crate) fn check_grad<T: Real>(&self, buf: &[T]) -> Result<()> {
        match buf.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric {
                layer: self.layer_of(i).to_string(),
            }),
        }
    }

    /// `sum_j coeffs[j] * d f(image_j) / d w`, accumulated in `f64`.
    pub fn output_grad_sum<T: Real>(&self, params: &ModelParams<T>, images: &[&Image], coeffs: &[f64]) -> Result<GradVector> {
        if images.len() != coeffs.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} coefficients",
                images.len(),
                coeffs.len()
            )));
        }
        let mut total = GradVector::zeros(self.plan.n_params);
        let mut buf = vec![T::zero(); self.plan.n_params];
        for (im, &c) in images.iter().zip(coeffs) {
            if c == 0.0 {
                // Still validate the image against the network.
                self.input_of::<T>(im)?;
                continue;
            }
            self.grad_into(params, im, &mut buf)?;
            total.axpy(c, &buf);
        }
        Ok(total)
    }

    /// Raw output maps of a convolutional stage.
    pub fn stage_maps<T: Real>(&self, params: &ModelParams<T>, image: &Image, layer: &str) -> Result<FeatureMaps> {
        let stage = self.plan.stage_index(layer)?;
        let cache = self.forward_cached(params, image)?;
        let (c, h, w) = self.plan.stage_shape(stage);
        Ok(FeatureMaps::from_flat(&cache.stages[stage], c, h, w))
    }

    /// Post-activation maps of a stage: `act(S_k)`, the maps the
    /// downstream layers consume.
    pub fn feature_maps<T: Real>(&self, params: &ModelParams<T>, image: &Image, layer: &str) -> Result<FeatureMaps> {
        let stage = self.plan.stage_index(layer)?;
        let cache = self.forward_cached(params, image)?;
        let (c, h, w) = self.plan.stage_shape(stage);
        let a = act_vec(self.plan.stage_act(stage), &cache.stages[stage]);
        Ok(FeatureMaps::from_flat(&a, c, h, w))
    }

    /// Continues a forward pass from raw stage maps.
    pub fn forward_from_stage<T: Real>(&self, params: &ModelParams<T>, layer: &str, maps: &FeatureMaps) -> Result<T> {
        self.check_params(params)?;
        let stage = self.plan.stage_index(layer)?;
        let (c, h, w) = self.plan.stage_shape(stage);
        if maps.count() != c || maps.height != h || maps.width != w {
            return Err(Error::Dimension(format!(
                "stage {layer} expects {c}x{h}x{w} maps"
            )));
        }
        let flat: Vec<T> = maps.maps.iter().flatten().map(|&v| T::of(v)).collect();
        let mut cache = FrameCache {
            input: Vec::new(),
            stages: vec![Vec::new(); stage],
            h1: vec![Vec::new(); stage],
            pooled: Vec::new(),
            dense_pre: Vec::new(),
            out_pre: T::zero(),
            output: T::zero(),
        };
        self.run_from(params.values(), stage, flat, &mut cache)?;
        Ok(cache.output)
    }

    /// Stage maps and `d output / d maps`, as used by grad-cam.
    pub fn stage_gradient<T: Real>(&self, params: &ModelParams<T>, image: &Image, layer: &str) -> Result<StageGrad> {
        let stage = self.plan.stage_index(layer)?;
        let cache = self.forward_cached(params, image)?;
        let mut scratch = vec![T::zero(); self.plan.n_params];
        let g = self
            .backward(params, &cache, T::one(), &mut scratch, Some(stage))?
            .expect("stage captured");
        let (c, h, w) = self.plan.stage_shape(stage);
        Ok(StageGrad {
            maps: FeatureMaps::from_flat(&cache.stages[stage], c, h, w),
            grads: FeatureMaps::from_flat(&g, c, h, w),
            output: cache.output.f64(),
        })
    }

    /// Size in bytes of the cache one frame's forward pass keeps alive.
    pub fn cache_bytes<T: Real>(&self) -> usize {
        let mut floats = self.plan.input.len().unwrap_or(0) + self.plan.stem.out_len();
        for b in &self.plan.blocks {
            floats += b.conv1.out_len() + b.conv2.out_len();
        }
        let (c, _, _) = self.plan.stage_shape(self.plan.blocks.len());
        floats += c + self.plan.hidden.iter().map(|d| d.dout).sum::<usize>() + 2;
        floats * std::mem::size_of::<T>()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{BlockSpec, ConvSpec, HeadSpec, InitScheme, Preset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_arch(act: Activation, seed: u64) -> ArchConfig {
        ArchConfig {
            name: Some("tiny".into()),
            input: ImageDims::new(8, 8, 1),
            stem: ConvSpec { filters: 3, kernel: 3, stride: 1 },
            blocks: vec![
                BlockSpec { filters: 3, kernel: 3, stride: 1, activation: act },
                BlockSpec { filters: 4, kernel: 3, stride: 2, activation: act },
            ],
            head: HeadSpec { hidden: vec![3], activation: act, output: OutputKind::Linear },
            init: InitScheme::HeNormal,
            seed,
        }
    }

    pub(crate) fn random_image(dims: ImageDims, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..dims.len().unwrap()).map(|_| rng.random::<f32>()).collect();
        Image::new(dims, px).unwrap()
    }

    /// Independent re-implementation of conv + ELU + dense, straight from
    /// the definitions, with nested loops and no im2col.
    fn naive_two_layer(p: &[f64], img: &Image, cout: usize, k: usize) -> f64 {
        let (h, w) = (img.height(), img.width());
        let pad = (k / 2) as isize;
        let mut pooled = vec![0.0; cout];
        for co in 0..cout {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let mut s = p[k * k * cout + co];
                    for kh in 0..k {
                        for kw in 0..k {
                            let iy = y as isize + kh as isize - pad;
                            let ix = x as isize + kw as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += p[(co * k + kh) * k + kw] * img.get(0, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                    acc += if s > 0.0 { s } else { s.exp_m1() };
                }
            }
            pooled[co] = acc / (h * w) as f64;
        }
        let off = k * k * cout + cout;
        let mut y = p[off + cout];
        for co in 0..cout {
            y += p[off + co] * pooled[co];
        }
        y
    }

    #[test]
    fn matches_naive_reimplementation() {
        // stem conv then one zero block (identity), GAP, linear output.
        let arch = ArchConfig {
            name: None,
            input: ImageDims::new(9, 10, 1),
            stem: ConvSpec { filters: 4, kernel: 3, stride: 1 },
            blocks: vec![BlockSpec { filters: 4, kernel: 3, stride: 1, activation: Activation::Elu }],
            head: HeadSpec { hidden: vec![], activation: Activation::Elu, output: OutputKind::Linear },
            init: InitScheme::HeNormal,
            seed: 3,
        };
        let net = Network::new(&arch).unwrap();
        let mut params = ModelParams::<f64>::build(&arch).unwrap();
        for s in params.segments() {
            if s.layer == "block1" {
                params.values_mut()[s.range()].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let stem_len = 3 * 3 * 4 + 4;
        let out = params.segment("output.weight").unwrap();
        let mut flat: Vec<f64> = params.values()[..stem_len].to_vec();
        flat.extend_from_slice(&params.values()[out.offset..out.offset + 5]);
        // give the biases something nonzero
        for i in 36..40 {
            params.values_mut()[i] = 0.1 * (i as f64 - 37.5);
            flat[i] = params.values()[i];
        }
        for seed in 0..5 {
            let img = random_image(arch.input, seed);
            let got = net.forward(&params, &img).unwrap();
            let want = naive_two_layer(&flat, &img, 4, 3);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    fn finite_difference_check(act: Activation, output: OutputKind) {
        let mut arch = tiny_arch(act, 21);
        arch.head.output = output;
        let net = Network::new(&arch).unwrap();
        let mut p = ModelParams::<f64>::build(&arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // nonzero biases so every path is exercised
        for s in p.segments().iter().filter(|s| s.is_bias()) {
            for v in &mut p.values_mut()[s.range()] {
                *v = rng.random_range(-0.2..0.2);
            }
        }
        let img = random_image(arch.input, 3);
        let mut g = vec![0.0; p.len()];
        net.grad_into(&p, &img, &mut g).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.values_mut()[i] += h;
            let mut minus = p.clone();
            minus.values_mut()[i] -= h;
            let fd = (net.forward(&plus, &img).unwrap() - net.forward(&minus, &img).unwrap()) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / (1e-4 + fd.abs().max(g[i].abs())));
        }
        assert!(worst < 1e-4, "{act:?}: worst rel err {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences_elu() {
        finite_difference_check(Activation::Elu, OutputKind::Linear);
    }

    #[test]
    fn gradient_matches_finite_differences_softplus() {
        finite_difference_check(Activation::Elu, OutputKind::Softplus);
    }

    #[test]
    fn stage_gradient_matches_finite_differences() {
        let arch = tiny_arch(Activation::Elu, 5);
        let net = Network::new(&arch).unwrap();
        let p = ModelParams::<f64>::build(&arch).unwrap();
        let img = random_image(arch.input, 3);
        for l in ["stem", "block1", "block2"] {
            let sg = net.stage_gradient(&p, &img, l).unwrap();
            let h = 1e-6;
            for c in 0..sg.maps.count() {
                for i in (0..sg.maps.maps[c].len()).step_by(5) {
                    let mut up = sg.maps.clone();
                    up.maps[c][i] += h;
                    let mut dn = sg.maps.clone();
                    dn.maps[c][i] -= h;
                    let fd = (net.forward_from_stage(&p, l, &up).unwrap()
                        - net.forward_from_stage(&p, l, &dn).unwrap())
                        / (2.0 * h);
                    assert!((fd - sg.grads.maps[c][i]).abs() < 1e-6 * (1.0 + fd.abs()), "{l}");
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let arch = ArchConfig::preset(Preset::Res9er, ImageDims::new(16, 16, 1), 0);
        let net = Network::new(&arch).unwrap();
        let p = ModelParams::<f32>::zeros(&arch).unwrap();
        for s in 0..3 {
            assert_eq!(net.forward(&p, &random_image(arch.input, s)).unwrap(), 0.0);
        }
        let maps = net.feature_maps(&p, &random_image(arch.input, 0), "block2").unwrap();
        assert_eq!(maps.count(), 32);
        assert!(maps.maps.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_equals_single() {
        let arch = tiny_arch(Activation::Elu, 1);
        let net = Network::new(&arch).unwrap();
        let p = ModelParams::<f64>::build(&arch).unwrap();
        let imgs: Vec<Image> = (0..4).map(|s| random_image(arch.input, s)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let batch = net.forward_batch(&p, &refs).unwrap();
        for (im, b) in imgs.iter().zip(batch) {
            assert_eq!(net.forward(&p, im).unwrap(), b);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let arch = tiny_arch(Activation::Elu, 1);
        let net = Network::new(&arch).unwrap();
        let p = ModelParams::<f64>::build(&arch).unwrap();
        let img = random_image(ImageDims::new(9, 8, 1), 0);
        assert!(matches!(net.forward(&p, &img), Err(Error::Dimension(_))));
    }

    #[test]
    fn cache_size_matches_estimate() {
        let arch = tiny_arch(Activation::Elu, 2);
        let net = Network::new(&arch).unwrap();
        let params = ModelParams::<f32>::build(&arch).unwrap();
        let cache = net.forward_cached(&params, &random_image(arch.input, 1)).unwrap();
        assert_eq!(cache.bytes(), net.cache_bytes::<f32>());
    }

    #[test]
    fn zero_block_is_identity() {
        let mut arch = tiny_arch(Activation::Elu, 4);
        arch.blocks[1].filters = 3;
        arch.blocks[1].stride = 1;
        let net = Network::new(&arch).unwrap();
        let mut p = ModelParams::<f64>::build(&arch).unwrap();
        for s in p.segments() {
            if s.layer == "block2" {
                p.values_mut()[s.range()].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let img = random_image(arch.input, 2);
        assert_eq!(
            net.stage_maps(&p, &img, "block1").unwrap(),
            net.stage_maps(&p, &img, "block2").unwrap()
        );
    }

    #[test]
    fn activation_swap_keeps_shapes() {
        let a = tiny_arch(Activation::Elu, 4);
        let b = a.clone().with_activation(Activation::Relu);
        assert_eq!(a.param_count(), b.param_count());
        let na = Network::new(&a).unwrap();
        let nb = Network::new(&b).unwrap();
        let pa = ModelParams::<f64>::build(&a).unwrap();
        let pb = ModelParams::<f64>::from_values(&b, pa.values().to_vec()).unwrap();
        let img = random_image(a.input, 0);
        for l in ["stem", "block1", "block2"] {
            let ma = na.feature_maps(&pa, &img, l).unwrap();
            let mb = nb.feature_maps(&pb, &img, l).unwrap();
            assert_eq!((ma.count(), ma.height, ma.width), (mb.count(), mb.height, mb.width));
        }
        // the stem is linear, so only the activation of its maps differs
        let raw = na.stage_maps(&pa, &img, "stem").unwrap();
        let ea = na.feature_maps(&pa, &img, "stem").unwrap();
        let eb = nb.feature_maps(&pb, &img, "stem").unwrap();
        for ((r, x), y) in raw.maps.iter().flatten().zip(ea.maps.iter().flatten()).zip(eb.maps.iter().flatten()) {
            assert_eq!(*x, Activation::Elu.apply(*r));
            assert_eq!(*y, Activation::Relu.apply(*r));
        }
    }

    #[test]
    fn feature_maps_recompose_to_forward() {
        let arch = tiny_arch(Activation::Elu, 9);
        let net = Network::new(&arch).unwrap();
        let p = ModelParams::<f64>::build(&arch).unwrap();
        let img = random_image(arch.input, 5);
        let y = net.forward(&p, &img).unwrap();
        for l in ["stem", "block1", "block2"] {
            let raw = net.stage_maps(&p, &img, l).unwrap();
            let y2 = net.forward_from_stage(&p, l, &raw).unwrap();
            assert!((y - y2).abs() < 1e-12, "{l}: {y} vs {y2}");
            let post = net.feature_maps(&p, &img, l).unwrap();
            assert_eq!(post.count(), raw.count());
            for (a, r) in post.maps.iter().flatten().zip(raw.maps.iter().flatten()) {
                assert_eq!(*a, Activation::Elu.apply(*r));
            }
        }
    }

    #[test]
    fn unknown_and_dense_layers() {
        let arch = tiny_arch(Activation::Elu, 9);
        let net = Network::new(&arch).unwrap();
        let p = ModelParams::<f64>::build(&arch).unwrap();
        let img = random_image(arch.input, 5);
        assert!(matches!(net.feature_maps(&p, &img, "block9"), Err(Error::UnknownLayer(_))));
        assert!(matches!(net.feature_maps(&p, &img, "dense1"), Err(Error::UnsupportedLayer(_))));
    }

    #[test]
    fn non_finite_params_name_the_layer() {
        let arch = tiny_arch(Activation::Elu, 9);
        let net = Network::new(&arch).unwrap();
        let mut p = ModelParams::<f64>::build(&arch).unwrap();
        let seg = p.segment("block2.conv1.weight").unwrap();
        p.values_mut()[seg.offset] = f64::INFINITY;
        let err = net.forward(&p, &random_image(arch.input, 0)).unwrap_err();
        match err {
            Error::Numeric { layer } => assert_eq!(layer, "block2"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn softplus_head_is_nonnegative() {
        let mut arch = tiny_arch(Activation::Elu, 2);
        arch.head.output = OutputKind::Softplus;
        let net = Network::new(&arch).unwrap();
        let mut p = ModelParams::<f64>::build(&arch).unwrap();
        let b = p.segment("output.bias").unwrap();
        p.values_mut()[b.offset] = -50.0;
        let y = net.forward(&p, &random_image(arch.input, 0)).unwrap();
        assert!((0.0..1e-10).contains(&y));
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let arch = ArchConfig::preset(Preset::Res9er, ImageDims::new(24, 24, 1), 1);
        let net = Network::new(&arch).unwrap();
        let p = ModelParams::<f32>::build(&arch).unwrap();
        let img = random_image(arch.input, 1);
        let mut g1 = vec![0f32; p.len()];
        let mut g2 = vec![0f32; p.len()];
        let y1 = net.grad_into(&p, &img, &mut g1).unwrap();
        let y2 = net.grad_into(&p, &img, &mut g2).unwrap();
        assert_eq!(y1.to_bits(), y2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
