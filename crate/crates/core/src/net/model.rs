use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use super::config::{Heads, LayerKind, NetworkConfig};
use super::layer::{ConvLayer, LayerCache, Mode};
use super::params::{ParamSet, Real};
use crate::ctc::{ctc_grad, ctc_loss, FramePosteriors};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Weight of the character-level loss in `L_word + lambda * L_char`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtlWeight(f64);

impl MtlWeight {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda.is_finite() && lambda >= 0.0 {
            Ok(Self(lambda))
        } else {
            Err(Error::Config(format!("lambda must be a finite value >= 0, got {lambda}")))
        }
    }

    pub fn lambda(self) -> f64 {
        self.0
    }

    pub fn combine(self, word: f64, char: f64) -> f64 {
        word + self.0 * char
    }
}

impl Default for MtlWeight {
    fn default() -> Self {
        Self(1.0)
    }
}

/// `L_word + lambda * L_char` for one utterance.
pub fn mtl_loss(
    p_char: &FramePosteriors,
    p_word: &FramePosteriors,
    z_char: &[usize],
    z_word: &[usize],
    w: MtlWeight,
) -> Result<f64> {
    Ok(w.combine(ctc_loss(p_word, z_word)?, ctc_loss(p_char, z_char)?))
}

#[derive(Debug, Clone)]
enum TrunkLayer {
    Conv(ConvLayer),
    Reshape { freq: usize, channels: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub chars: &'a [usize],
    pub words: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct HeadPosteriors {
    pub char: Option<FramePosteriors>,
    pub word: Option<FramePosteriors>,
}

type HeadOutput<F> = (Option<LayerCache<F>>, Option<Vec<FramePosteriors>>);

/// Output and saved state of a batch forward pass.
#[derive(Debug)]
pub struct Forward<F> {
    trunk: Vec<Option<LayerCache<F>>>,
    char_head: Option<LayerCache<F>>,
    word_head: Option<LayerCache<F>>,
    pub posteriors: Vec<HeadPosteriors>,
}

impl<F> Forward<F> {
    /// Largest clipped-ReLU output anywhere in the trunk.
    pub fn max_activation(&self) -> f64 {
        self.trunk
            .iter()
            .flatten()
            .filter_map(|c| c.max_activation)
            .fold(0.0, f64::max)
    }
}

/// Mean per-utterance losses of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub word: Option<f64>,
    pub char: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    config: NetworkConfig,
    trunk: Vec<TrunkLayer>,
    char_head: Option<ConvLayer>,
    word_head: Option<ConvLayer>,
    params: ParamSet<F>,
    buffers: ParamSet<F>,
}

fn to_f64_matrix<F: Real>(x: &Array3<F>) -> Array2<f64> {
    let (t, _, c) = x.dim();
    Array2::from_shape_fn((t, c), |(i, k)| x[[i, 0, k]].to_f64().unwrap())
}

impl<F: Real> Model<F> {
    /// Fresh model; every tensor draws its initialization from its own
    /// named substream of `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut buffers = ParamSet::default();
        let (mut freq, mut channels) = (config.input_features, 1);
        let mut trunk = Vec::with_capacity(config.trunk.len());
        for spec in &config.trunk {
            match spec.kind {
                LayerKind::Reshape => {
                    trunk.push(TrunkLayer::Reshape { freq, channels });
                    channels *= freq;
                    freq = 1;
                }
                _ => {
                    let layer = ConvLayer::build(spec, freq, channels, config.bn_epsilon, seed, &mut params, &mut buffers);
                    freq = layer.out_freq();
                    channels = layer.out_channels();
                    trunk.push(TrunkLayer::Conv(layer));
                }
            }
        }
        let (char_spec, word_spec) = config.head_specs();
        let mut head = |spec, on: bool| {
            on.then(|| ConvLayer::build(&spec, freq, channels, config.bn_epsilon, seed, &mut params, &mut buffers))
        };
        let char_head = head(char_spec, config.heads.has_char());
        let word_head = head(word_spec, config.heads.has_word());
        Ok(Self {
            config,
            trunk,
            char_head,
            word_head,
            params,
            buffers,
        })
    }

    /// Model with stored tensors; layouts must match `config`.
    pub fn from_parts(config: NetworkConfig, params: ParamSet<F>, buffers: ParamSet<F>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if !model.params.same_layout(&params) || !model.buffers.same_layout(&buffers) {
            return Err(Error::Checkpoint("tensor layout does not match the network config".into()));
        }
        model.params = params;
        model.buffers = buffers;
        Ok(model)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamSet<F> {
        &self.buffers
    }

    pub fn heads(&self) -> Heads {
        self.config.heads
    }

    /// `inputs` are `T x input_features` feature matrices. Train mode needs a
    /// dropout stream and at least two utterances for batch statistics.
    pub fn forward(&self, inputs: &[ArrayView2<F>], mode: Mode, mut dropout_rng: Option<&mut Rng>) -> Result<Forward<F>> {
        if mode == Mode::Train && inputs.len() < 2 {
            return Err(Error::BatchTooSmall(inputs.len()));
        }
        let mut acts = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (t, f) = x.dim();
            if f != self.config.input_features || t == 0 {
                return Err(Error::Shape {
                    layer: "input".into(),
                    detail: format!("expected [T, {}], got [{t}, {f}]", self.config.input_features),
                });
            }
            let owned = x.as_standard_layout().to_owned();
            acts.push(owned.into_shape_with_order((t, f, 1)).expect("input reshape"));
        }

        let clip = F::of(self.config.relu_clip);
        let mut trunk_caches = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            match layer {
                TrunkLayer::Reshape { freq, channels } => {
                    acts = acts
                        .into_iter()
                        .map(|a| {
                            let t = a.dim().0;
                            a.into_shape_with_order((t, 1, freq * channels)).expect("reshape")
                        })
                        .collect();
                    trunk_caches.push(None);
                }
                TrunkLayer::Conv(conv) => {
                    let (out, cache) = conv.forward(
                        &self.params,
                        &self.buffers,
                        acts,
                        mode,
                        clip,
                        dropout_rng.as_deref_mut(),
                    )?;
                    acts = out;
                    trunk_caches.push(Some(cache));
                }
            }
        }

        let run_head = |head: &Option<ConvLayer>, blank: usize| -> Result<HeadOutput<F>> {
            let Some(head) = head else { return Ok((None, None)) };
            let (logits, cache) = head.forward(&self.params, &self.buffers, acts.clone(), mode, clip, None)?;
            let post = logits
                .iter()
                .map(|l| FramePosteriors::from_logits(to_f64_matrix(l).view(), blank))
                .collect();
            Ok((Some(cache), Some(post)))
        };
        let (char_cache, char_post) = run_head(&self.char_head, self.config.char_blank)?;
        let (word_cache, word_post) = run_head(&self.word_head, self.config.word_blank)?;

        let mut char_iter = char_post.map(|v| v.into_iter());
        let mut word_iter = word_post.map(|v| v.into_iter());
        let posteriors = (0..inputs.len())
            .map(|_| HeadPosteriors {
                char: char_iter.as_mut().and_then(Iterator::next),
                word: word_iter.as_mut().and_then(Iterator::next),
            })
            .collect();
        Ok(Forward {
            trunk: trunk_caches,
            char_head: char_cache,
            word_head: word_cache,
            posteriors,
        })
    }

    /// Eval-mode posteriors for one utterance.
    pub fn posteriors(&self, features: ArrayView2<F>) -> Result<HeadPosteriors> {
        let mut fwd = self.forward(&[features], Mode::Eval, None)?;
        Ok(fwd.posteriors.pop().expect("one utterance"))
    }

    fn char_weight(&self, w: MtlWeight) -> f64 {
        match self.config.heads {
            Heads::Both => w.lambda(),
            Heads::Char => 1.0,
            Heads::Word => 0.0,
        }
    }

    fn combine(&self, w: MtlWeight, word: Option<f64>, char: Option<f64>) -> f64 {
        match (word, char) {
            (Some(lw), Some(lc)) => w.combine(lw, lc),
            (Some(lw), None) => lw,
            (None, Some(lc)) => lc,
            (None, None) => 0.0,
        }
    }

    /// Batch-mean losses without gradients.
    pub fn loss(&self, fwd: &Forward<F>, targets: &[Targets], w: MtlWeight) -> Result<BatchLoss> {
        self.check_batch(fwd, targets)?;
        let n = targets.len() as f64;
        let (mut total, mut word_sum, mut char_sum) = (0.0, 0.0, 0.0);
        for (post, tg) in fwd.posteriors.iter().zip(targets) {
            let lw = post.word.as_ref().map(|p| ctc_loss(p, tg.words)).transpose()?;
            let lc = post.char.as_ref().map(|p| ctc_loss(p, tg.chars)).transpose()?;
            total += self.combine(w, lw, lc);
            word_sum += lw.unwrap_or(0.0);
            char_sum += lc.unwrap_or(0.0);
        }
        Ok(BatchLoss {
            total: total / n,
            word: self.word_head.as_ref().map(|_| word_sum / n),
            char: self.char_head.as_ref().map(|_| char_sum / n),
        })
    }

    fn check_batch(&self, fwd: &Forward<F>, targets: &[Targets]) -> Result<()> {
        if fwd.posteriors.len() != targets.len() || targets.is_empty() {
            return Err(Error::Config(format!(
                "{} targets for {} utterances",
                targets.len(),
                fwd.posteriors.len()
            )));
        }
        Ok(())
    }

    /// Loss and gradient of the batch-mean MTL loss for a train-mode forward
    /// pass. With zero character weight the character head is skipped and
    /// its parameters receive exactly zero gradient.
    pub fn backward(&self, fwd: &Forward<F>, targets: &[Targets], w: MtlWeight) -> Result<(BatchLoss, ParamSet<F>)> {
        self.check_batch(fwd, targets)?;
        let n = targets.len() as f64;
        let char_weight = self.char_weight(w);
        let mut grads = self.params.zeros_like();
        let (mut total, mut word_sum, mut char_sum) = (0.0, 0.0, 0.0);
        let mut word_grads = Vec::new();
        let mut char_grads = Vec::new();
        let to_logit_grad = |g: &Array2<f64>, scale: f64| {
            let (t, v) = g.dim();
            Array3::from_shape_fn((t, 1, v), |(i, _, k)| F::of(g[[i, k]] * scale))
        };
        for (post, tg) in fwd.posteriors.iter().zip(targets) {
            let lw = match &post.word {
                Some(p) => {
                    let g = ctc_grad(p, tg.words)?;
                    word_grads.push(to_logit_grad(&g.wrt_logits, 1.0 / n));
                    Some(g.loss)
                }
                None => None,
            };
            let lc = match &post.char {
                Some(p) if char_weight > 0.0 => {
                    let g = ctc_grad(p, tg.chars)?;
                    char_grads.push(to_logit_grad(&g.wrt_logits, char_weight / n));
                    Some(g.loss)
                }
                Some(p) => Some(ctc_loss(p, tg.chars)?),
                None => None,
            };
            total += self.combine(w, lw, lc);
            word_sum += lw.unwrap_or(0.0);
            char_sum += lc.unwrap_or(0.0);
        }

        let clip = F::of(self.config.relu_clip);
        let mut grad_trunk: Option<Vec<Array3<F>>> = None;
        let mut accumulate = |g: Vec<Array3<F>>| match grad_trunk.as_mut() {
            None => grad_trunk = Some(g),
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += &b),
        };
        if let (Some(head), Some(cache)) = (&self.word_head, &fwd.word_head) {
            accumulate(head.backward(&self.params, cache, word_grads, clip, &mut grads, true)?.expect("input grad"));
        }
        if let (Some(head), Some(cache)) = (&self.char_head, &fwd.char_head) {
            if char_weight > 0.0 {
                accumulate(head.backward(&self.params, cache, char_grads, clip, &mut grads, true)?.expect("input grad"));
            }
        }

        if let Some(mut g) = grad_trunk {
            for (i, (layer, cache)) in self.trunk.iter().zip(&fwd.trunk).enumerate().rev() {
                match (layer, cache) {
                    (TrunkLayer::Reshape { freq, channels }, _) => {
                        g = g
                            .into_iter()
                            .map(|a| {
                                let t = a.dim().0;
                                a.into_shape_with_order((t, *freq, *channels)).expect("reshape")
                            })
                            .collect();
                    }
                    (TrunkLayer::Conv(conv), Some(cache)) => {
                        match conv.backward(&self.params, cache, g, clip, &mut grads, i > 0)? {
                            Some(next) => g = next,
                            None => break,
                        }
                    }
                    (TrunkLayer::Conv(conv), None) => {
                        return Err(Error::Shape {
                            layer: conv.spec.name.clone(),
                            detail: "missing forward cache".into(),
                        })
                    }
                }
            }
        }

        let loss = BatchLoss {
            total: total / n,
            word: self.word_head.as_ref().map(|_| word_sum / n),
            char: self.char_head.as_ref().map(|_| char_sum / n),
        };
        Ok((loss, grads))
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// batch-norm statistics.
    pub fn update_running_stats(&mut self, fwd: &Forward<F>) {
        let momentum = self.config.bn_momentum;
        for (layer, cache) in self.trunk.iter().zip(&fwd.trunk) {
            if let (TrunkLayer::Conv(conv), Some(cache)) = (layer, cache) {
                conv.update_running_stats(cache, momentum, &mut self.buffers);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::config::NetworkConfig;
    use crate::rng::substream;
    use ndarray::Array2;
    use rand::Rng as _;

    fn tiny_config() -> NetworkConfig {
        let mut cfg = NetworkConfig::desk(5, 4);
        cfg.input_features = 8;
        for l in cfg.trunk.iter_mut() {
            if l.filters > 0 {
                l.filters = l.filters.min(6);
            }
        }
        cfg
    }

    fn random_inputs(seed: u64, lens: &[usize], feats: usize) -> Vec<Array2<f64>> {
        let mut rng = substream(seed, "inputs");
        lens.iter()
            .map(|&t| Array2::from_shape_fn((t, feats), |_| rng.random_range(-1.5..1.5)))
            .collect()
    }

    #[test]
    fn mtl_weight_rules() {
        assert!(MtlWeight::new(-0.1).is_err());
        assert!(MtlWeight::new(f64::NAN).is_err());
        let w = MtlWeight::new(0.0).unwrap();
        assert_eq!(w.combine(1.2345, 9.0), 1.2345);
        let (a, b) = (MtlWeight::new(0.3).unwrap(), MtlWeight::new(1.1).unwrap());
        let (lw, lc) = (2.5, 0.75);
        let lhs = a.combine(lw, lc) + b.combine(lw, lc);
        let rhs = MtlWeight::new(1.4).unwrap().combine(lw, lc) + w.combine(lw, lc);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn mtl_loss_sums_heads_at_lambda_one() {
        let p = FramePosteriors::from_logits(Array2::from_elem((4, 3), 0.1).view(), 2);
        let q = FramePosteriors::from_logits(Array2::from_elem((4, 5), -0.3).view(), 4);
        let one = mtl_loss(&p, &q, &[0, 1], &[3], MtlWeight::default()).unwrap();
        let sum = ctc_loss(&q, &[3]).unwrap() + ctc_loss(&p, &[0, 1]).unwrap();
        assert_eq!(one, sum);
        let zero = mtl_loss(&p, &q, &[0, 1], &[3], MtlWeight::new(0.0).unwrap()).unwrap();
        assert_eq!(zero.to_bits(), ctc_loss(&q, &[3]).unwrap().to_bits());
    }

    #[test]
    fn eval_forward_is_deterministic_and_normalized() {
        let model = Model::<f32>::new(NetworkConfig::desk(32, 12), 3).unwrap();
        let x = random_inputs(1, &[37], 40).remove(0).mapv(|v| v as f32);
        let a = model.posteriors(x.view()).unwrap();
        let b = model.posteriors(x.view()).unwrap();
        let (pa, pb) = (a.char.unwrap(), b.char.unwrap());
        assert_eq!(pa, pb);
        assert_eq!(pa.frames(), 19);
        for row in pa.log_probs().rows() {
            let lse = crate::ctc::log_sum_exp(row.iter().copied());
            assert!(lse.abs() < 1e-5);
        }
        assert_eq!(a.word.unwrap().alphabet_size(), 12);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let model = Model::<f32>::new(NetworkConfig::desk(32, 12), 3).unwrap();
        let x = Array2::<f32>::zeros((20, 39));
        let err = model.posteriors(x.view()).unwrap_err();
        assert!(err.to_string().contains("input"));
        let xs = [Array2::<f32>::zeros((20, 40))];
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let mut rng = substream(0, "dropout");
        assert!(matches!(
            model.forward(&views, Mode::Train, Some(&mut rng)),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn activations_never_exceed_clip() {
        let mut model = Model::<f32>::new(NetworkConfig::desk(32, 12), 5).unwrap();
        // wide batch-norm gains push many units into the clipped region
        for t in model.params_mut().tensors.iter_mut().filter(|t| t.name.ends_with("bn.gamma")) {
            t.data.fill(60.0);
        }
        let xs: Vec<Array2<f32>> = random_inputs(2, &[30, 44], 40)
            .into_iter()
            .map(|x| x.mapv(|v| v as f32))
            .collect();
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let mut rng = substream(0, "dropout");
        let train = model.forward(&views, Mode::Train, Some(&mut rng)).unwrap();
        assert!(train.max_activation() <= 20.0);
        assert!(train.max_activation() > 19.0);
        let eval = model.forward(&views, Mode::Eval, None).unwrap();
        assert!(eval.max_activation() <= 20.0);
    }

    struct Problem {
        inputs: Vec<Array2<f64>>,
        chars: Vec<Vec<usize>>,
        words: Vec<Vec<usize>>,
    }

    fn problem() -> Problem {
        Problem {
            inputs: random_inputs(9, &[12, 9], 8),
            chars: vec![vec![0, 1, 2], vec![3, 0]],
            words: vec![vec![1], vec![2, 0]],
        }
    }

    fn loss_at(model: &Model<f64>, prob: &Problem, w: MtlWeight) -> f64 {
        let views: Vec<_> = prob.inputs.iter().map(|x| x.view()).collect();
        let targets: Vec<_> = prob.chars.iter().zip(&prob.words).map(|(c, w)| Targets { chars: c, words: w }).collect();
        let mut rng = substream(4, "dropout");
        let fwd = model.forward(&views, Mode::Train, Some(&mut rng)).unwrap();
        model.loss(&fwd, &targets, w).unwrap().total
    }

    fn grads_at(model: &Model<f64>, prob: &Problem, w: MtlWeight) -> (BatchLoss, ParamSet<f64>) {
        let views: Vec<_> = prob.inputs.iter().map(|x| x.view()).collect();
        let targets: Vec<_> = prob.chars.iter().zip(&prob.words).map(|(c, w)| Targets { chars: c, words: w }).collect();
        let mut rng = substream(4, "dropout");
        let fwd = model.forward(&views, Mode::Train, Some(&mut rng)).unwrap();
        model.backward(&fwd, &targets, w).unwrap()
    }

    #[test]
    fn gradients_match_central_differences_in_f64() {
        let mut model = Model::<f64>::new(tiny_config(), 17).unwrap();
        let prob = problem();
        let w = MtlWeight::new(0.7).unwrap();
        let (loss, grads) = grads_at(&model, &prob, w);
        assert!((loss.total - loss_at(&model, &prob, w)).abs() < 1e-12);

        let total = model.params().num_scalars();
        let mut rng = substream(99, "pick");
        let h = 1e-6;
        let mut checked = 0;
        while checked < 30 {
            let (slot, i) = model.params().locate(rng.random_range(0..total)).unwrap();
            let analytic = grads.tensors[slot].data[i];
            let orig = model.params().tensors[slot].data[i];
            model.params_mut().tensors[slot].data[i] = orig + h;
            let up = loss_at(&model, &prob, w);
            model.params_mut().tensors[slot].data[i] = orig - h;
            let down = loss_at(&model, &prob, w);
            model.params_mut().tensors[slot].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < 1e-5,
                "{}[{i}]: analytic {analytic} numeric {numeric} rel {rel}",
                model.params().tensors[slot].name
            );
            checked += 1;
        }
    }

    #[test]
    fn zero_lambda_gives_char_head_zero_gradient() {
        let model = Model::<f64>::new(tiny_config(), 17).unwrap();
        let (_, grads) = grads_at(&model, &problem(), MtlWeight::new(0.0).unwrap());
        for t in grads.tensors.iter().filter(|t| t.name.starts_with("char-head")) {
            assert!(t.data.iter().all(|&g| g == 0.0), "{}", t.name);
        }
        assert!(grads.get("word-head.weight").unwrap().data.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn trunk_gradient_is_word_plus_lambda_char() {
        let prob = problem();
        let lambda = 0.6;
        let both = Model::<f64>::new(tiny_config(), 21).unwrap();
        let mut word_cfg = tiny_config();
        word_cfg.heads = Heads::Word;
        let mut char_cfg = tiny_config();
        char_cfg.heads = Heads::Char;
        let word_only = Model::<f64>::new(word_cfg, 21).unwrap();
        let char_only = Model::<f64>::new(char_cfg, 21).unwrap();

        let (_, g_both) = grads_at(&both, &prob, MtlWeight::new(lambda).unwrap());
        let (_, g_word) = grads_at(&word_only, &prob, MtlWeight::default());
        let (_, g_char) = grads_at(&char_only, &prob, MtlWeight::default());
        for t in g_both.tensors.iter().filter(|t| !t.name.contains("head")) {
            let gw = g_word.get(&t.name).unwrap();
            let gc = g_char.get(&t.name).unwrap();
            for ((a, w), c) in t.data.iter().zip(&gw.data).zip(&gc.data) {
                let expected = w + lambda * c;
                assert!((a - expected).abs() < 1e-10 * (1.0 + expected.abs()), "{}", t.name);
            }
        }
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut model = Model::<f64>::new(tiny_config(), 2).unwrap();
        let prob = problem();
        let views: Vec<_> = prob.inputs.iter().map(|x| x.view()).collect();
        let mut rng = substream(4, "dropout");
        let fwd = model.forward(&views, Mode::Train, Some(&mut rng)).unwrap();
        let before = model.buffers().clone();
        model.update_running_stats(&fwd);
        assert_ne!(&before, model.buffers());
    }
}
