//! Segmentation decoder: residual entry block, two skip-connected ×2
//! refinement modules, a 2-channel head with channel softmax at stride 4,
//! and a final ×4 bilinear upsample.

use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::nn::{Conv, ResBlock};
use crate::tensor::{Element, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct RefinementParams {
    /// Maps the skip feature to the decoder width; bias-free, so a zero
    /// skip contributes exactly nothing.
    pub skip_conv: Conv,
    pub merge_residual: ResBlock,
    pub post_residual: ResBlock,
}

impl RefinementParams {
    fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        skip_channels: usize,
        width: usize,
    ) -> Self {
        Self {
            skip_conv: Conv::register(store, init, &format!("{name}.skip_conv"), skip_channels, width, 3, 1, false),
            merge_residual: ResBlock::register(store, init, &format!("{name}.merge_residual"), width),
            post_residual: ResBlock::register(store, init, &format!("{name}.post_residual"), width),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    pub entry_conv: Conv,
    pub entry_residual: ResBlock,
    pub refine8: RefinementParams,
    pub refine4: RefinementParams,
    pub head: Conv,
    pub width: usize,
}

impl DecoderParams {
    /// `embed` is the transformer width `C`; `skip8` / `skip4` are the
    /// backbone widths at strides 8 and 4.
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        embed: usize,
        skip8: usize,
        skip4: usize,
        width: usize,
    ) -> Self {
        Self {
            entry_conv: Conv::register(store, init, "decoder.entry_conv", embed, width, 3, 1, true),
            entry_residual: ResBlock::register(store, init, "decoder.entry_residual", width),
            refine8: RefinementParams::register(store, init, "decoder.refine8", skip8, width),
            refine4: RefinementParams::register(store, init, "decoder.refine4", skip4, width),
            head: Conv::register(store, init, "decoder.head", width, 2, 3, 1, true),
            width,
        }
    }

    pub fn param_ids<T: Element>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        crate::backbone::prefixed(store, &["decoder."])
    }
}

/// Upsamples `x` by two, merges the projected skip feature, and refines.
pub fn refinement<'t, T: Element>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    x: Var<'t, T>,
    skip: Var<'t, T>,
    params: &RefinementParams,
) -> Result<Var<'t, T>> {
    let (xs, ss) = (x.shape(), skip.shape());
    if xs.len() != 3 || ss.len() != 3 || ss[1] != 2 * xs[1] || ss[2] != 2 * xs[2] {
        return Err(Error::dim(
            "refinement",
            format!("skip {ss:?} is not twice the spatial size of {xs:?}"),
        ));
    }
    let s = params.skip_conv.forward(tape, store, skip)?;
    let main = params
        .merge_residual
        .forward(tape, store, x)?
        .bilinear_resize(ss[1], ss[2])?;
    params.post_residual.forward(tape, store, s.add(main)?)
}

/// Channel softmax of a `c×h×w` map.
pub fn channel_softmax<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.reshape([s[0], s[1] * s[2]])?
        .t()?
        .softmax_rows()?
        .t()?
        .reshape(s)
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput<'t, T: Element> {
    /// `2×(h/4)×(w/4)` probabilities straight from the softmax.
    pub quarter: Var<'t, T>,
    /// `2×h×w` probabilities; channel 1 is foreground.
    pub probs: Var<'t, T>,
}

/// Decodes `t_out` (`HW×C`, stride-16 grid) into full-resolution
/// two-class probabilities using the stride-8 and stride-4 skips.
pub fn decode<'t, T: Element>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    t_out: Var<'t, T>,
    f8: Var<'t, T>,
    f4: Var<'t, T>,
    params: &DecoderParams,
) -> Result<DecoderOutput<'t, T>> {
    let (ts, s8, s4) = (t_out.shape(), f8.shape(), f4.shape());
    if ts.len() != 2 || s8.len() != 3 || s4.len() != 3 {
        return Err(Error::dim("decode", format!("t_out {ts:?}, f8 {s8:?}, f4 {s4:?}")));
    }
    if s8[1] % 2 != 0 || s8[2] % 2 != 0 {
        return Err(Error::dim("decode", format!("stride-8 skip {s8:?} has odd extents")));
    }
    let (h, w) = (s8[1] / 2, s8[2] / 2);
    if ts[0] != h * w || s4[1] != 2 * s8[1] || s4[2] != 2 * s8[2] {
        return Err(Error::dim(
            "decode",
            format!("t_out {ts:?} does not fit skips f8 {s8:?} / f4 {s4:?}"),
        ));
    }
    let x = t_out.t()?.reshape([ts[1], h, w])?;
    let x = params.entry_conv.forward(tape, store, x)?;
    let x = params.entry_residual.forward(tape, store, x)?;
    let x = refinement(tape, store, x, f8, &params.refine8)?;
    let x = refinement(tape, store, x, f4, &params.refine4)?;
    let logits = params.head.forward(tape, store, x.relu()?)?;
    let quarter = channel_softmax(logits)?;
    let probs = quarter.bilinear_resize(4 * s4[1], 4 * s4[2])?;
    Ok(DecoderOutput { quarter, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kernels, Tensor};

    fn setup(embed: usize, width: usize) -> (ParamStore<f64>, DecoderParams) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let p = DecoderParams::register(&mut store, &mut init, embed, 6, 5, width);
        (store, p)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        Initializer::new(seed).uniform(shape, 1.0)
    }

    fn channel_sums(p: &Tensor<f64>) -> Vec<f64> {
        let plane = p.shape()[1] * p.shape()[2];
        (0..plane).map(|i| p.data()[i] + p.data()[plane + i]).collect()
    }

    #[test]
    fn decode_shape_and_normalization() {
        let (store, p) = setup(8, 8);
        let tape = Tape::new();
        let out = decode(
            &tape,
            &store,
            tape.constant(random(&[16, 8], 1)).unwrap(),
            tape.constant(random(&[6, 8, 8], 2)).unwrap(),
            tape.constant(random(&[5, 16, 16], 3)).unwrap(),
            &p,
        )
        .unwrap();
        assert_eq!(out.probs.shape(), vec![2, 64, 64]);
        assert_eq!(out.quarter.shape(), vec![2, 16, 16]);
        assert!(channel_sums(&out.quarter.value()).iter().all(|s| (s - 1.0).abs() < 1e-6));
        assert!(channel_sums(&out.probs.value()).iter().all(|s| (s - 1.0).abs() < 1e-5));
        assert!(out.probs.value().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn decode_rejects_scale_mismatch() {
        let (store, p) = setup(8, 8);
        let tape = Tape::new();
        let res = decode(
            &tape,
            &store,
            tape.constant(random(&[9, 8], 1)).unwrap(),
            tape.constant(random(&[6, 8, 8], 2)).unwrap(),
            tape.constant(random(&[5, 16, 16], 3)).unwrap(),
            &p,
        );
        assert!(matches!(res, Err(Error::Dimension { .. })));
    }

    fn conv(store: &ParamStore<f64>, c: &Conv, x: &Tensor<f64>) -> Tensor<f64> {
        let y = kernels::conv2d(x, store.value(c.kernel), c.stride, c.padding).unwrap();
        match c.bias {
            Some(b) => kernels::add_channel_bias(&y, store.value(b)).unwrap(),
            None => y,
        }
    }

    fn relu(x: &Tensor<f64>) -> Tensor<f64> {
        x.map(|v| v.max(0.0))
    }

    fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        kernels::zip_with("add", a, b, |x, y| x + y).unwrap()
    }

    fn res(store: &ParamStore<f64>, r: &ResBlock, x: &Tensor<f64>) -> Tensor<f64> {
        let y = conv(store, &r.conv2, &relu(&conv(store, &r.conv1, &relu(x))));
        add(x, &y)
    }

    fn refine(store: &ParamStore<f64>, r: &RefinementParams, x: &Tensor<f64>, skip: &Tensor<f64>) -> Tensor<f64> {
        let s = conv(store, &r.skip_conv, skip);
        let m = res(store, &r.merge_residual, x);
        let m = kernels::bilinear_resize(&m, skip.shape()[1], skip.shape()[2]).unwrap();
        res(store, &r.post_residual, &add(&s, &m))
    }

    #[test]
    fn decode_matches_straight_line_oracle() {
        let (store, p) = setup(8, 4);
        let t = random(&[4, 8], 4);
        let f8 = random(&[6, 4, 4], 5);
        let f4 = random(&[5, 8, 8], 6);
        let tape = Tape::new();
        let out = decode(
            &tape,
            &store,
            tape.constant(t.clone()).unwrap(),
            tape.constant(f8.clone()).unwrap(),
            tape.constant(f4.clone()).unwrap(),
            &p,
        )
        .unwrap();

        let x = kernels::transpose(&t).unwrap().reshape([8, 2, 2]).unwrap();
        let x = res(&store, &p.entry_residual, &conv(&store, &p.entry_conv, &x));
        let x = refine(&store, &p.refine8, &x, &f8);
        let x = refine(&store, &p.refine4, &x, &f4);
        let logits = conv(&store, &p.head, &relu(&x));
        let plane = 64;
        let soft = Tensor::from_fn([2, 8, 8], |i| {
            let (c, px) = (i / plane, i % plane);
            let (a, b) = (logits.data()[px], logits.data()[plane + px]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            if c == 0 { ea / (ea + eb) } else { eb / (ea + eb) }
        });
        let want = kernels::bilinear_resize(&soft, 32, 32).unwrap();
        assert!(out.probs.value().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn refinement_zero_skip_and_shapes() {
        let (store, p) = setup(8, 4);
        let tape = Tape::new();
        for (h, w) in [(1, 1), (2, 3), (5, 4)] {
            let x = tape.constant(random(&[4, h, w], 7)).unwrap();
            let skip = tape.constant(Tensor::zeros([6, 2 * h, 2 * w])).unwrap();
            let out = refinement(&tape, &store, x, skip, &p.refine8).unwrap();
            assert_eq!(out.shape(), vec![4, 2 * h, 2 * w]);

            let main = kernels::bilinear_resize(&res(&store, &p.refine8.merge_residual, &x.value()), 2 * h, 2 * w).unwrap();
            let want = res(&store, &p.refine8.post_residual, &main);
            assert!(out.value().max_abs_diff(&want).unwrap() < 1e-12);
        }
        let x = tape.constant(random(&[4, 2, 2], 7)).unwrap();
        let bad = tape.constant(Tensor::zeros([6, 3, 4])).unwrap();
        assert!(refinement(&tape, &store, x, bad, &p.refine8).is_err());
    }

    #[test]
    fn refinement_seeded_oracle() {
        let (store, p) = setup(8, 4);
        let x = random(&[4, 3, 2], 8);
        let skip = random(&[6, 6, 4], 9);
        let tape = Tape::new();
        let out = refinement(
            &tape,
            &store,
            tape.constant(x.clone()).unwrap(),
            tape.constant(skip.clone()).unwrap(),
            &p.refine8,
        )
        .unwrap();
        let want = refine(&store, &p.refine8, &x, &skip);
        assert!(out.value().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn every_kernel_is_3x3_and_head_has_two_channels() {
        let (store, p) = setup(8, 4);
        for id in p.param_ids(&store) {
            let param = store.get(id);
            if param.name.ends_with(".weight") {
                assert_eq!(&param.value().shape()[2..], &[3, 3], "{}", param.name);
            }
        }
        assert_eq!(store.value(p.head.kernel).shape()[0], 2);
    }
}
