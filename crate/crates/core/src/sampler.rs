//! Ancestral sampling conditioned on a prototype.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Variant;
use crate::diffusion::ReverseCoeffs;
use crate::error::{PdmError, Result};
use crate::prototypes::assign;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{supervised_select, ModelState};

/// How the conditioning prototype is chosen.
#[derive(Clone, Debug)]
pub enum Conditioning<S> {
    /// Encode the image (`[C, H, W]`) and use its nearest prototype.
    Image(Tensor<S>),
    /// Prototype bound to a class (supervised checkpoints only).
    Label(usize),
    /// Uniform draw over the bank, independently for each sample.
    Random,
    /// A specific prototype.
    Prototype(usize),
}

#[derive(Clone, Debug)]
pub struct SampleRequest<S> {
    pub count: usize,
    pub conditioning: Conditioning<S>,
    pub seed: u64,
    /// Run only the last `n` reverse steps (`t = n..1`) from pure noise.
    /// Off the standard procedure; meant for smoke tests.
    pub steps_override: Option<usize>,
}

impl<S: Scalar> SampleRequest<S> {
    pub fn new(count: usize, conditioning: Conditioning<S>, seed: u64) -> Self {
        Self { count, conditioning, seed, steps_override: None }
    }
}

/// Chosen prototype index (if any) and the vector it contributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition<S> {
    pub index: Option<usize>,
    pub vector: Vec<S>,
}

/// Resolves the conditioning of one sample. The baseline variant has no
/// prototypes and always yields a zero vector.
pub fn select_condition<S: Scalar, R: Rng + ?Sized>(
    request: &SampleRequest<S>,
    state: &ModelState<S>,
    rng: &mut R,
) -> Result<Condition<S>> {
    let bank = &state.bank;
    if state.variant() == Variant::Ddpm {
        return match request.conditioning {
            Conditioning::Label(_) => Err(PdmError::Config("label conditioning needs a supervised checkpoint".into())),
            _ => Ok(Condition { index: None, vector: vec![S::zero(); bank.d()] }),
        };
    }
    let index = match &request.conditioning {
        Conditioning::Image(img) => {
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            let batch = img.clone().reshape(&shape)?;
            let feats = state.features(&batch)?;
            assign(feats.item(0), bank)?.index
        }
        Conditioning::Label(label) => {
            if state.variant() != Variant::SPdm {
                return Err(PdmError::Config("label conditioning needs a supervised checkpoint".into()));
            }
            let v = supervised_select(*label, bank)?;
            let index = bank.labels.as_ref().and_then(|l| l.iter().position(|&c| c == *label));
            return Ok(Condition { index, vector: v.to_vec() });
        }
        Conditioning::Random => rng.random_range(0..bank.k()),
        Conditioning::Prototype(k) => {
            if *k >= bank.k() {
                return Err(PdmError::InvalidRange(format!("prototype index {k} >= K = {}", bank.k())));
            }
            *k
        }
    };
    Ok(Condition { index: Some(index), vector: bank.get(index).to_vec() })
}

/// Samples are generated in chunks of at most this many images.
const CHUNK: usize = 64;

/// Generated images (`[count, C, H, W]`, clamped to `[-1, 1]`) and the
/// prototype index used for each.
#[derive(Clone, Debug)]
pub struct Generated<S> {
    pub images: Tensor<S>,
    pub prototypes: Vec<Option<usize>>,
}

/// Runs the reverse chain from `x_T ~ N(0, I)` down to `t = 1`, conditioning
/// every step on the same prototype plus `gamma(t)`. The final step adds no
/// noise.
pub fn generate<S: Scalar>(request: &SampleRequest<S>, state: &ModelState<S>) -> Result<Generated<S>> {
    let image_shape = state.image_shape;
    if request.count == 0 {
        return Err(PdmError::InvalidRange("sample count must be positive".into()));
    }
    let steps = state.schedule.steps();
    let start = request.steps_override.unwrap_or(steps);
    if start == 0 || start > steps {
        return Err(PdmError::IndexOutOfRange { t: start, max: steps });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let conditions: Vec<Condition<S>> = (0..request.count)
        .map(|_| select_condition(request, state, &mut rng))
        .collect::<Result<_>>()?;

    let per: usize = image_shape.iter().product();
    let mut out = Vec::with_capacity(request.count * per);
    for chunk in conditions.chunks(CHUNK) {
        let n = chunk.len();
        let mut shape = vec![n];
        shape.extend_from_slice(&image_shape);
        let mut x = Tensor::<S>::randn(&shape, 1.0, &mut rng);
        let protos: Vec<S> = chunk.iter().flat_map(|c| c.vector.iter().copied()).collect();
        for t in (1..=start).rev() {
            let (mut cond, _) = state.time.forward(&vec![t; n])?;
            cond.data_mut().iter_mut().zip(&protos).for_each(|(c, &p)| *c += p);
            let eps_hat = state.unet.predict(&x, &cond)?;
            let z = if t > 1 { Tensor::randn(&shape, 1.0, &mut rng) } else { Tensor::zeros(&shape) };
            ReverseCoeffs::at(&state.schedule, t)?.apply(x.data_mut(), eps_hat.data(), z.data());
            if !x.all_finite() {
                return Err(PdmError::Numeric(format!("non-finite sample at t = {t}")));
            }
        }
        out.extend(x.data().iter().map(|&v| v.max(-S::one()).min(S::one())));
    }
    let mut shape = vec![request.count];
    shape.extend_from_slice(&image_shape);
    Ok(Generated { images: Tensor::from_vec(&shape, out)?, prototypes: conditions.iter().map(|c| c.index).collect() })
}
