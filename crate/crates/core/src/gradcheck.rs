//! Finite-difference gradient suites over every layer, model and loss at a
//! tiny configuration (width 8, vocabularies of 20, sequences of at most
//! five predicted tokens).
//!
//! Each suite evaluates at a fixed parameter point drawn from its own seed
//! stream. Coordinates whose true gradient is far below the loss's rounding
//! noise `ulp(f) / 2h` cannot pass a relative test, so points are drawn wide
//! enough that attention and recurrences are not flat.

use crate::autodiff::{finite_diff_report, FiniteDiffReport, Tape, Var};
use crate::error::Result;
use crate::models::{Autoencoder, Captioner, DecoderBatch, Dropout, EncoderBatch, ModelDims, Translator};
use crate::nn::{Attention, BiLstm, Linear, LstmCell, LstmState};
use crate::objectives::{
    autoencoder_xe, captioner_xe, embed_align_reg, joint_loss, translator_xe, xe_loss, AlignMaps, CaptionBatch,
    JointBatches, JointBindings, JointModels, JointSettings, Seq2SeqBatch, SharedVocabMap, ALIGN_EPS,
};
use crate::params::{uniform, Binding, ParamStore};
use crate::rng::{Rng, SeedStream};
use crate::tensor::Tensor;
use crate::vocab::TokenSeq;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

const WIDTH: usize = 8;
const VOCAB: usize = 20;
const DIMS: ModelDims = ModelDims {
    width: WIDTH,
    attention: WIDTH,
    image_feature: 6,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub worst: FiniteDiffReport,
}

impl SuiteResult {
    /// Relative error with the denominator floored at the loss's
    /// finite-difference resolution; this is what [`passed`](Self::passed)
    /// gates on.
    pub fn rel_error(&self) -> f64 {
        self.worst.roundoff_error
    }

    /// Relative error with only the `1e-8` floor. Coordinates whose gradient
    /// lies under the rounding noise of the loss dominate it.
    pub fn unfloored_rel_error(&self) -> f64 {
        self.worst.max_rel_error
    }

    pub fn passed(&self) -> bool {
        self.rel_error() < TOLERANCE
    }
}

pub const SUITES: [&str; 13] = [
    "linear",
    "lstm_cell",
    "bilstm",
    "attention",
    "captioner",
    "translator",
    "autoencoder",
    "xe_loss",
    "pivot_reg",
    "target_reg",
    "joint_loss",
    "joint_loss_input_sites",
    "pipeline_loss",
];

/// Runs every suite in order.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    SUITES.iter().map(|name| run(name, seed)).collect()
}

pub fn run(name: &str, seed: u64) -> Result<SuiteResult> {
    let s = SeedStream::new(seed).split(name);
    let worst = match name {
        "linear" => linear(s),
        "lstm_cell" => lstm_cell(s),
        "bilstm" => bilstm(s),
        "attention" => attention(s),
        "captioner" => captioner(s),
        "translator" => translator(s),
        "autoencoder" => autoencoder(s),
        "xe_loss" => xe(s),
        "pivot_reg" => reg(s, 14),
        "target_reg" => reg(s, 11),
        "joint_loss" => joint(s, JointSettings::default()),
        "joint_loss_input_sites" => joint(
            s,
            JointSettings {
                pivot_site: crate::models::TieSite::InputEmbedding,
                target_site: crate::models::TieSite::InputEmbedding,
                ..Default::default()
            },
        ),
        "pipeline_loss" => pipeline(s),
        other => Err(crate::error::Error::invalid(format!("unknown gradcheck suite `{other}`"))),
    }?;
    let name = SUITES.iter().copied().find(|n| *n == name).unwrap_or("unknown");
    Ok(SuiteResult { name, worst })
}

/// Parameter values for a check: tables at ±1.5, everything else at ±1.
fn point(store: &ParamStore, rng: &mut Rng) -> Vec<Tensor> {
    store
        .iter()
        .map(|p| {
            let scale = if p.name.contains("emb") { 1.5 } else { 1.0 };
            uniform(p.value.rows(), p.value.cols(), scale, rng)
        })
        .collect()
}

fn input(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    uniform(rows, cols, 1.0, rng)
}

/// Weighted sum of all entries, so every output coordinate matters.
fn probe(tape: &mut Tape<'_>, x: Var, rng: &mut Rng) -> Result<Var> {
    let [r, c] = tape.shape(x);
    let w = tape.constant(input(r, c, rng));
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn check<F>(store: &ParamStore, s: SeedStream, extra: Vec<Tensor>, f: F) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape<'_>, &Binding, &[Var]) -> Result<Var>,
{
    let n = store.len();
    let mut params = point(store, &mut s.split("point").rng());
    params.extend(extra);
    finite_diff_report(
        |tape, vars| {
            let b = Binding::from_vars(vars[..n].to_vec());
            f(tape, &b, &vars[n..])
        },
        &params,
        STEP,
    )
}

fn linear(s: SeedStream) -> Result<FiniteDiffReport> {
    let mut store = ParamStore::new();
    let l = Linear::new(&mut store, "l", WIDTH, 5, &mut s.split("init").rng());
    let x = input(3, WIDTH, &mut s.split("x").rng());
    check(&store, s, vec![x], |tape, b, ins| {
        let y = l.forward(tape, b, ins[0])?;
        let y = tape.tanh(y);
        probe(tape, y, &mut s.split("probe").rng())
    })
}

fn lstm_cell(s: SeedStream) -> Result<FiniteDiffReport> {
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", 5, WIDTH, &mut s.split("init").rng());
    let mut rng = s.split("x").rng();
    let xs: Vec<Tensor> = (0..3).map(|_| input(2, 5, &mut rng)).collect();
    let h0 = input(2, WIDTH, &mut rng);
    let c0 = input(2, WIDTH, &mut rng);
    let mut extra = xs;
    extra.push(h0);
    extra.push(c0);
    check(&store, s, extra, |tape, b, ins| {
        let mut state = LstmState { h: ins[3], c: ins[4] };
        for &x in &ins[..3] {
            state = cell.step(tape, b, x, state)?;
        }
        let out = tape.concat_cols(&[state.h, state.c])?;
        probe(tape, out, &mut s.split("probe").rng())
    })
}

fn bilstm(s: SeedStream) -> Result<FiniteDiffReport> {
    let mut store = ParamStore::new();
    let enc = BiLstm::new(&mut store, "enc", 5, WIDTH, &mut s.split("init").rng());
    let mut rng = s.split("x").rng();
    let xs: Vec<Tensor> = (0..4).map(|_| input(2, 5, &mut rng)).collect();
    let valid = vec![vec![true, true], vec![true, true], vec![true, false], vec![true, false]];
    check(&store, s, xs, |tape, b, ins| {
        let e = enc.encode(tape, b, ins, &valid)?;
        let fin = tape.concat_cols(&[e.forward_final.h, e.backward_final.c])?;
        let rows = tape.mask_rows(e.annotations, e.annotations, &e.mask)?;
        let a = probe(tape, rows, &mut s.split("probe").rng())?;
        let f = probe(tape, fin, &mut s.split("probe-final").rng())?;
        tape.add(a, f)
    })
}

fn attention(s: SeedStream) -> Result<FiniteDiffReport> {
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "att", WIDTH, 2 * WIDTH, WIDTH, &mut s.split("init").rng());
    let mut rng = s.split("x").rng();
    let query = input(2, WIDTH, &mut rng);
    let ann = input(2 * 4, 2 * WIDTH, &mut rng);
    let mask = vec![true, true, true, true, true, true, false, false];
    check(&store, s, vec![query, ann], |tape, b, ins| {
        let keys = att.keys(tape, b, ins[1])?;
        let (ctx, w) = att.attend(tape, b, ins[0], keys, ins[1], &mask)?;
        let c = probe(tape, ctx, &mut s.split("probe").rng())?;
        let w = probe(tape, w, &mut s.split("probe-w").rng())?;
        tape.add(c, w)
    })
}

fn seq(ids: &[u32]) -> TokenSeq {
    TokenSeq::from_content(ids.to_vec())
}

fn caption_batch(rng: &mut Rng) -> Result<CaptionBatch> {
    Ok(CaptionBatch {
        feats: input(2, DIMS.image_feature, rng),
        seqs: DecoderBatch::new(&[&seq(&[4, 17, 9, 19]), &seq(&[6, 11])])?,
    })
}

fn parallel_batch() -> Result<Seq2SeqBatch> {
    Ok(Seq2SeqBatch {
        src: EncoderBatch::new(&[&[4, 11, 6, 19, 8], &[5, 17]])?,
        tgt: DecoderBatch::new(&[&seq(&[5, 13, 18]), &seq(&[7, 4, 4, 12])])?,
    })
}

fn target_batch() -> Result<Seq2SeqBatch> {
    let (a, b) = (seq(&[4, 12, 12, 7]), seq(&[9, 16]));
    Ok(Seq2SeqBatch {
        src: EncoderBatch::new(&[a.content(), b.content()])?,
        tgt: DecoderBatch::new(&[&a, &b])?,
    })
}

fn captioner(s: SeedStream) -> Result<FiniteDiffReport> {
    let m = Captioner::new(VOCAB, DIMS, &mut s.split("init").rng());
    let batch = caption_batch(&mut s.split("x").rng())?;
    check(&m.store, s, vec![], |tape, b, _| {
        captioner_xe(tape, &m, b, &batch, &mut Dropout::off())
    })
}

fn translator(s: SeedStream) -> Result<FiniteDiffReport> {
    let m = Translator::new(VOCAB, VOCAB, DIMS, &mut s.split("init").rng());
    let batch = parallel_batch()?;
    check(&m.store, s, vec![], |tape, b, _| {
        translator_xe(tape, &m, b, &batch, &mut Dropout::off())
    })
}

fn autoencoder(s: SeedStream) -> Result<FiniteDiffReport> {
    let m = Autoencoder::new(VOCAB, DIMS, &mut s.split("init").rng());
    let batch = target_batch()?;
    check(&m.store, s, vec![], |tape, b, _| {
        autoencoder_xe(tape, &m, b, &batch, &mut Dropout::off())
    })
}

fn xe(s: SeedStream) -> Result<FiniteDiffReport> {
    let mut rng = s.split("x").rng();
    let logits = uniform(5, VOCAB, 2.0, &mut rng);
    let targets = [3, 0, 19, 7, 7];
    let mask = [true, true, false, true, true];
    finite_diff_report(|tape, v| xe_loss(tape, v[0], &targets, &mask), &[logits], STEP)
}

fn shared_map(n: usize) -> SharedVocabMap {
    SharedVocabMap::new((0..n).map(|i| (4 + i, VOCAB - 1 - i)).collect()).expect("distinct rows")
}

fn reg(s: SeedStream, shared: usize) -> Result<FiniteDiffReport> {
    let mut rng = s.split("x").rng();
    let a = uniform(VOCAB, WIDTH, 1.0, &mut rng);
    let b = uniform(VOCAB, WIDTH, 1.0, &mut rng);
    let map = shared_map(shared);
    // only the trainable side is perturbed; the reference is a constant
    finite_diff_report(
        |tape, v| {
            let frozen = tape.constant(b.clone());
            embed_align_reg(tape, v[0], frozen, &map, ALIGN_EPS)
        },
        &[a],
        STEP,
    )
}

fn joint(s: SeedStream, settings: JointSettings) -> Result<FiniteDiffReport> {
    let cap = Captioner::new(VOCAB, DIMS, &mut s.split("cap").rng());
    let mt = Translator::new(VOCAB, VOCAB, DIMS, &mut s.split("mt").rng());
    let ae = Autoencoder::new(VOCAB, DIMS, &mut s.split("ae").rng());
    let caption = caption_batch(&mut s.split("x").rng())?;
    let parallel = parallel_batch()?;
    let target = target_batch()?;
    let maps = AlignMaps {
        pivot: shared_map(12),
        target: shared_map(9),
    };
    let mut params = point(&cap.store, &mut s.split("point-cap").rng());
    params.extend(point(&mt.store, &mut s.split("point-mt").rng()));
    params.extend(point(&ae.store, &mut s.split("point-ae").rng()));
    let (nc, nt) = (cap.store.len(), mt.store.len());
    // the reference sides are constants of the objective, so the numeric
    // derivative must not see them move either
    let pivot_ref = params[cap.tie_matrix(settings.pivot_site).index()].clone();
    let target_ref = params[nc + nt + ae.tie_matrix(settings.target_site).index()].clone();
    finite_diff_report(
        |tape, vars| {
            let bc = Binding::from_vars(vars[..nc].to_vec());
            let bt = Binding::from_vars(vars[nc..nc + nt].to_vec());
            let ba = Binding::from_vars(vars[nc + nt..].to_vec());
            let pr = tape.constant(pivot_ref.clone());
            let tr = tape.constant(target_ref.clone());
            let (total, _) = joint_loss(
                tape,
                &JointModels {
                    captioner: &cap,
                    translator: &mt,
                    autoencoder: &ae,
                },
                &JointBindings {
                    pivot_reference: Some(pr),
                    target_reference: Some(tr),
                    ..JointBindings::new(&bc, &bt, &ba)
                },
                &JointBatches {
                    caption: &caption,
                    parallel: &parallel,
                    target: &target,
                },
                &maps,
                &settings,
                &mut Dropout::off(),
            )?;
            Ok(total)
        },
        &params,
        STEP,
    )
}

fn pipeline(s: SeedStream) -> Result<FiniteDiffReport> {
    let cap = Captioner::new(VOCAB, DIMS, &mut s.split("cap").rng());
    let mt = Translator::new(VOCAB, VOCAB, DIMS, &mut s.split("mt").rng());
    let caption = caption_batch(&mut s.split("x").rng())?;
    let parallel = parallel_batch()?;
    let mut params = point(&cap.store, &mut s.split("point-cap").rng());
    params.extend(point(&mt.store, &mut s.split("point-mt").rng()));
    let nc = cap.store.len();
    finite_diff_report(
        |tape, vars| {
            let bc = Binding::from_vars(vars[..nc].to_vec());
            let bt = Binding::from_vars(vars[nc..].to_vec());
            crate::objectives::pipeline_loss(tape, &cap, &bc, &caption, &mt, &bt, &parallel, &mut Dropout::off())
        },
        &params,
        STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for r in run_all(0).unwrap() {
            assert!(r.passed(), "{}: {:?}", r.name, r.worst);
        }
    }

    #[test]
    fn layer_and_loss_suites_meet_the_unfloored_bound_too() {
        for name in ["linear", "lstm_cell", "bilstm", "attention", "xe_loss", "pivot_reg", "target_reg", "captioner", "autoencoder"] {
            let r = run(name, 0).unwrap();
            assert!(r.unfloored_rel_error() < TOLERANCE, "{name}: {:?}", r.worst);
        }
    }

    #[test]
    fn unfloored_misses_are_rounding_noise() {
        // Where the plain comparison fails, the two derivatives still agree to
        // within a few ulps of the loss divided by the step.
        for name in ["translator", "joint_loss", "joint_loss_input_sites", "pipeline_loss"] {
            let w = run(name, 0).unwrap().worst;
            let noise = 8.0 * w.loss.abs() * f64::EPSILON / (2.0 * STEP);
            assert!((w.analytic - w.numeric).abs() < noise, "{name}: {w:?}");
        }
    }

    #[test]
    fn a_small_wrong_gradient_on_a_large_loss_is_caught() {
        // f = 1 + 1e-7 x, with half the slope hidden from backward. The error
        // is tiny in absolute terms but far above the rounding noise of f.
        let x = Tensor::row_vector(vec![0.4]);
        let r = finite_diff_report(
            |tape, v| {
                let seen = tape.scale(v[0], 1e-7);
                let hidden = tape.detach(v[0]);
                let hidden = tape.scale(hidden, 1e-7);
                let one = tape.constant(Tensor::scalar(1.0));
                let y = tape.add(seen, hidden)?;
                let y = tape.add(y, one)?;
                Ok(tape.sum(y))
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert!(r.roundoff_error > 1e-2, "{r:?}");
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // d/dx of x² reported as x: the check must flag it
        let x = Tensor::row_vector(vec![0.3, -1.2, 2.0]);
        let r = finite_diff_report(
            |tape, v| {
                let half = tape.scale(v[0], 0.5);
                let stop = tape.detach(v[0]);
                let y = tape.mul(half, stop)?;
                Ok(tape.sum(y))
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.3 && r.roundoff_error > 0.3);
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run("nope", 0).is_err());
    }
}
