"""
Guidance functions and the three guidance computations.

A guidance is a differentiable feature map f, a loss l(c, f(x)) and a prompt
c. Forward guidance adds s(t) * grad_{z_t} l(c, f(z0_hat(z_t))) to the
predicted noise; backward guidance optimizes a clean-space correction
delta_z0 and folds it into the noise prediction; classifier guidance is the
noisy-classifier baseline both are compared against.

Feature maps work on batches: x has shape (n, d), f(x) shape (n, e), and
vjp(x, v) returns v^T df/dx with shape (n, d).
"""

from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Iterator, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.special import expit, log_softmax

from ._array import as_batch, check_finite, restore
from .errors import (
    DegenerateScheduleError,
    DimensionMismatchError,
    GradientUnavailableError,
    InvalidRangeError,
    MissingJacobianError,
    NonFiniteError,
    UniversalGuidanceError,
    ZeroEmbeddingError,
)
from .models import (
    Denoiser,
    DenoiserOutput,
    GaussianMixture,
    NoisyComponentClassifier,
    as_batch_matrix,
    component_log_responsibilities,
    predict_z0,
)
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)

DEFAULT_BACKWARD_STEPS = 5
DEFAULT_BACKWARD_STEP_SIZE = 0.1
MAX_HALVINGS = 10

COMPONENT_CLASSIFIER = "component-classifier"
NOISY_CLASSIFIER = "noisy-classifier"
LINEAR_INVERSE = "linear-inverse"
LABEL_FIELD = "label-field"
EMBEDDING_MATCH = "embedding-match"
CUSTOM = "custom"

CLASSIFIER_KINDS = (COMPONENT_CLASSIFIER, NOISY_CLASSIFIER)


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------

class FeatureMap(ABC):
    """Differentiable map f from R^d to R^e with a vector-Jacobian product."""

    @abstractmethod
    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Evaluate f on a (n, d) batch."""

    @abstractmethod
    def vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Return (df/dx)^T v for every row."""


class CallableFeatureMap(FeatureMap):
    """Feature map built from user callbacks f(x) and vjp(x, v)."""

    def __init__(self, fn: Callable, vjp_fn: Callable):
        self.fn = fn
        self.vjp_fn = vjp_fn

    def __call__(self, x):
        return np.asarray(self.fn(x), dtype=float)

    def vjp(self, x, cotangent):
        return np.asarray(self.vjp_fn(x, cotangent), dtype=float)


class LinearMap(FeatureMap):
    """f(x) = A x."""

    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim == 1:
            matrix = matrix[None, :]
        self.matrix = matrix

    def __call__(self, x):
        return x @ self.matrix.T

    def vjp(self, x, cotangent):
        return cotangent @ self.matrix


class ComponentLogProbabilities(FeatureMap):
    """
    Clean-data component classifier emitting log-probabilities.

    log softmax of the component log-responsibilities divided by a
    temperature. The cross-entropy against a class then reads one entry,
    which keeps the composed loss finite far from the target basin.
    """

    def __init__(self, gmm: GaussianMixture, temperature: float = 1.0):
        if temperature <= 0.0:
            raise InvalidRangeError(f"temperature must be positive, got {temperature}")
        self.gmm = gmm
        self.temperature = float(temperature)

    def __call__(self, x):
        log_resp, _ = component_log_responsibilities(x, self.gmm)
        return log_softmax(log_resp / self.temperature, axis=-1)

    def probabilities(self, x) -> np.ndarray:
        return np.exp(self(x))

    def vjp(self, x, cotangent):
        log_resp, grad_log_resp = component_log_responsibilities(x, self.gmm)
        probs = np.exp(log_softmax(log_resp / self.temperature, axis=-1))
        centered = cotangent - probs * cotangent.sum(axis=-1, keepdims=True)
        return np.einsum("nk,nkd->nd", centered, grad_log_resp) / self.temperature


class ScaledLogits(FeatureMap):
    """Per-dimension logits x_i / temperature; sigmoid gives the label field."""

    def __init__(self, temperature: float = 1.0):
        if temperature <= 0.0:
            raise InvalidRangeError(f"temperature must be positive, got {temperature}")
        self.temperature = float(temperature)

    def __call__(self, x):
        return x / self.temperature

    def probabilities(self, x) -> np.ndarray:
        return expit(self(x))

    def vjp(self, x, cotangent):
        return cotangent / self.temperature


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

class GuidanceLoss(ABC):
    """Loss l(c, y) >= 0 with its gradient in y."""

    @abstractmethod
    def __call__(self, prompt, y: np.ndarray) -> np.ndarray:
        """Per-row loss, shape (n,)."""

    @abstractmethod
    def gradient(self, prompt, y: np.ndarray) -> np.ndarray:
        """Per-row gradient in y, shape (n, e)."""


class CallableLoss(GuidanceLoss):
    """Loss built from user callbacks l(c, y) and grad_y l(c, y)."""

    def __init__(self, fn: Callable, grad_fn: Callable):
        self.fn = fn
        self.grad_fn = grad_fn

    def __call__(self, prompt, y):
        return np.asarray(self.fn(prompt, y), dtype=float)

    def gradient(self, prompt, y):
        return np.asarray(self.grad_fn(prompt, y), dtype=float)


class HalfSquaredError(GuidanceLoss):
    """0.5 * ||c - y||^2."""

    def __call__(self, prompt, y):
        return 0.5 * np.sum((y - prompt) ** 2, axis=-1)

    def gradient(self, prompt, y):
        return y - prompt


class CrossEntropy(GuidanceLoss):
    """-log p_c for log-probability features y."""

    def __call__(self, prompt, y):
        return -y[:, int(prompt)]

    def gradient(self, prompt, y):
        grad = np.zeros_like(y)
        grad[:, int(prompt)] = -1.0
        return grad


class BinaryCrossEntropy(GuidanceLoss):
    """Summed binary cross-entropy of sigmoid(y) against 0/1 labels."""

    def __call__(self, prompt, y):
        return np.sum(np.logaddexp(0.0, y) - prompt * y, axis=-1)

    def gradient(self, prompt, y):
        return expit(y) - prompt


class NegativeCosine(GuidanceLoss):
    """-cos(y, c)."""

    def _norms(self, prompt, y):
        y_norm = np.linalg.norm(y, axis=-1)
        if np.any(y_norm < 1e-12):
            raise ZeroEmbeddingError("embedding norm below 1e-12 in cosine loss")
        return y_norm, float(np.linalg.norm(prompt))

    def __call__(self, prompt, y):
        y_norm, c_norm = self._norms(prompt, y)
        return -(y @ prompt) / (y_norm * c_norm)

    def gradient(self, prompt, y):
        y_norm, c_norm = self._norms(prompt, y)
        cosine = (y @ prompt) / (y_norm * c_norm)
        along_prompt = prompt[None, :] / (y_norm * c_norm)[:, None]
        along_y = cosine[:, None] * y / (y_norm**2)[:, None]
        return -(along_prompt - along_y)


class L1Distance(GuidanceLoss):
    """||y - c||_1 with sign(0) = 0 as subgradient."""

    def __call__(self, prompt, y):
        return np.sum(np.abs(y - prompt), axis=-1)

    def gradient(self, prompt, y):
        return np.sign(y - prompt)


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StrengthSchedule:
    """s(t) = w * sqrt(1 - alpha_t)."""
    w: float = 1.0

    def __post_init__(self):
        if self.w < 0.0:
            raise InvalidRangeError(f"guidance strength w must be >= 0, got {self.w}")

    def __call__(self, alpha_t: float) -> float:
        return self.w * float(np.sqrt(1.0 - alpha_t))


@dataclass(frozen=True, eq=False)
class GuidanceLibraryEntry:
    """A built-in (f, l, c) triple with the parameters it was made from."""
    kind: str
    feature: FeatureMap
    loss: GuidanceLoss
    prompt: Any = None
    params: Dict[str, Any] = field(default_factory=dict)
    noisy_world: Optional[GaussianMixture] = None


@dataclass(frozen=True, eq=False)
class GuidanceSpec:
    """
    One guidance: (f, l, c) plus strength w, backward steps m, step size and
    mixing weight.

    A spec with a noisy_world takes its forward term from the exact noisy
    classifier p_t(c | z_t) of that mixture instead of differentiating
    l(c, f(z0_hat)); f and l still serve backward steps and loss reports.
    """
    feature: FeatureMap
    loss: GuidanceLoss
    prompt: Any
    strength: StrengthSchedule = field(default_factory=StrengthSchedule)
    backward_steps: int = DEFAULT_BACKWARD_STEPS
    backward_step_size: float = DEFAULT_BACKWARD_STEP_SIZE
    weight: float = 1.0
    kind: str = CUSTOM
    name: Optional[str] = None
    params: Dict[str, Any] = field(default_factory=dict)
    noisy_world: Optional[GaussianMixture] = None

    def __post_init__(self):
        if int(self.backward_steps) != self.backward_steps or self.backward_steps < 0:
            raise InvalidRangeError(
                f"backward_steps must be a nonnegative integer, got {self.backward_steps}"
            )
        if self.backward_step_size <= 0.0:
            raise InvalidRangeError(
                f"backward_step_size must be positive, got {self.backward_step_size}"
            )
        if self.weight < 0.0:
            raise InvalidRangeError(f"weight must be >= 0, got {self.weight}")
        if isinstance(self.prompt, (list, tuple)):
            object.__setattr__(self, "prompt", np.asarray(self.prompt, dtype=float))

    @classmethod
    def from_entry(
        cls,
        entry: GuidanceLibraryEntry,
        w: float = 1.0,
        backward_steps: int = DEFAULT_BACKWARD_STEPS,
        backward_step_size: float = DEFAULT_BACKWARD_STEP_SIZE,
        weight: float = 1.0,
        prompt: Any = None,
        name: Optional[str] = None,
    ) -> "GuidanceSpec":
        """Create a spec from a library entry"""
        return cls(
            feature=entry.feature,
            loss=entry.loss,
            prompt=entry.prompt if prompt is None else prompt,
            strength=StrengthSchedule(w),
            backward_steps=backward_steps,
            backward_step_size=backward_step_size,
            weight=weight,
            kind=entry.kind,
            name=name or entry.kind,
            params=dict(entry.params),
            noisy_world=entry.noisy_world,
        )

    @property
    def uses_forward(self) -> bool:
        return self.strength.w > 0.0

    @property
    def uses_backward(self) -> bool:
        return self.backward_steps > 0

    def with_settings(self, **changes) -> "GuidanceSpec":
        """Copy with w / backward_steps / weight etc. replaced."""
        if "w" in changes:
            changes["strength"] = StrengthSchedule(changes.pop("w"))
        return replace(self, **changes)

    def loss_value(self, x) -> np.ndarray:
        xb, single = as_batch(x, "x")
        value = self.loss(self.prompt, self.feature(xb))
        return restore(value, single)

    def loss_and_gradient(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """l(c, f(x)) and its gradient in x via the feature vjp."""
        xb, single = as_batch(x, "x")
        y = self.feature(xb)
        value = self.loss(self.prompt, y)
        grad = self.feature.vjp(xb, self.loss.gradient(self.prompt, y))
        return restore(value, single), restore(grad, single)


# ---------------------------------------------------------------------------
# Library constructors
# ---------------------------------------------------------------------------

def make_component_classifier(
    gmm: GaussianMixture, temperature: float = 1.0, target: Optional[int] = None
) -> GuidanceLibraryEntry:
    """
    Component classifier on clean data with cross-entropy loss.

    Args:
        gmm: Mixture whose components are the classes (K >= 2)
        temperature: Softmax temperature
        target: Prompt class (may be set later on the spec)
    """
    if gmm.K < 2:
        raise InvalidRangeError("a component classifier needs at least two components")
    if target is not None and not 0 <= int(target) < gmm.K:
        raise InvalidRangeError(f"target class {target} outside [0, {gmm.K})")
    return GuidanceLibraryEntry(
        kind=COMPONENT_CLASSIFIER,
        feature=ComponentLogProbabilities(gmm, temperature),
        loss=CrossEntropy(),
        prompt=None if target is None else int(target),
        params={"temperature": float(temperature), "target": target},
    )


def make_noisy_classifier(
    gmm: GaussianMixture, target: Optional[int] = None
) -> GuidanceLibraryEntry:
    """
    Classifier guidance with the exact noisy component classifier.

    The forward term is -grad_{z_t} log p_t(c | z_t). Backward steps and
    the reported loss use the clean classifier at temperature 1.
    """
    entry = make_component_classifier(gmm, temperature=1.0, target=target)
    return replace(
        entry,
        kind=NOISY_CLASSIFIER,
        params={"target": target},
        noisy_world=gmm,
    )


def make_linear_inverse(A, y) -> GuidanceLibraryEntry:
    """
    Linear observation guidance f(x) = A x with 0.5 ||y - A x||^2.

    One-hot rows of A observe single coordinates (inpainting).
    """
    A = np.array(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    y = np.array(y, dtype=float).reshape(-1)
    if y.size != A.shape[0]:
        raise DimensionMismatchError(f"y has {y.size} entries for {A.shape[0]} observation rows")
    if np.linalg.matrix_rank(A) < A.shape[0]:
        logger.warning(
            f"Observation matrix of shape {A.shape} is rank deficient; oracle uses a pseudo-inverse"
        )
    return GuidanceLibraryEntry(
        kind=LINEAR_INVERSE,
        feature=LinearMap(A),
        loss=HalfSquaredError(),
        prompt=y,
        params={"A": A.tolist(), "y": y.tolist()},
    )


def make_label_field(labels, temperature: float = 1.0) -> GuidanceLibraryEntry:
    """Per-dimension binary labels with summed sigmoid cross-entropy."""
    labels = np.array(labels, dtype=float).reshape(-1)
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise InvalidRangeError("labels must be 0 or 1")
    return GuidanceLibraryEntry(
        kind=LABEL_FIELD,
        feature=ScaledLogits(temperature),
        loss=BinaryCrossEntropy(),
        prompt=labels,
        params={"labels": labels.tolist(), "temperature": float(temperature)},
    )


def make_embedding_match(W, target, mode: str = "cosine") -> GuidanceLibraryEntry:
    """
    Linear embedding f(x) = W x matched to a target embedding.

    Args:
        W: (e, d) embedding matrix
        target: (e,) target embedding
        mode: "cosine" (negative cosine similarity) or "l1"
    """
    W = np.array(W, dtype=float)
    if W.ndim == 1:
        W = W[None, :]
    target = np.array(target, dtype=float).reshape(-1)
    if target.size != W.shape[0]:
        raise DimensionMismatchError(
            f"target has {target.size} entries for embedding size {W.shape[0]}"
        )
    if mode == "cosine":
        if np.linalg.norm(target) < 1e-12:
            raise ZeroEmbeddingError("cosine mode needs a nonzero target embedding")
        loss: GuidanceLoss = NegativeCosine()
    elif mode == "l1":
        loss = L1Distance()
    else:
        raise InvalidRangeError(f"Unknown embedding mode: {mode}. Use 'cosine' or 'l1'")
    return GuidanceLibraryEntry(
        kind=EMBEDDING_MATCH,
        feature=LinearMap(W),
        loss=loss,
        prompt=target,
        params={"W": W.tolist(), "target": target.tolist(), "mode": mode},
    )


# ---------------------------------------------------------------------------
# Guidance computations
# ---------------------------------------------------------------------------

def noisy_classifier_gradient(
    z_t, t: int, classifier_on_noisy, c: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    -log p(c | z_t) and its gradient in z_t from a classifier on noisy inputs.

    Raises:
        GradientUnavailableError: If the classifier lacks log_prob_gradient or
            log_probabilities
    """
    needed = ("log_prob_gradient", "log_probabilities")
    if not all(hasattr(classifier_on_noisy, name) for name in needed):
        raise GradientUnavailableError("classifier has no log_prob_gradient / log_probabilities")
    zb, single = as_batch(z_t, "z_t")
    loss = -np.asarray(classifier_on_noisy.log_probabilities(zb, t))[:, int(c)]
    check_finite(loss, "noisy classifier loss", batched=True, t=t)
    grad = -np.asarray(classifier_on_noisy.log_prob_gradient(zb, t, int(c)), dtype=float)
    check_finite(grad, "noisy classifier gradient", batched=True, t=t)
    return restore(loss, single), restore(grad, single)


def classifier_guidance_eps(
    z_t,
    t: int,
    denoiser: Denoiser,
    classifier_on_noisy,
    c: int,
    schedule: NoiseSchedule,
    form: str = "log_prob",
) -> np.ndarray:
    """
    Classifier guidance with a classifier that accepts noisy inputs.

    form="log_prob" computes eps - sqrt(1 - alpha_t) grad log p(c | z_t);
    form="cross_entropy" computes eps + sqrt(1 - alpha_t) grad l_ce(c, p(z_t)).
    The two are the same quantity.

    Raises:
        GradientUnavailableError: If the classifier exposes no gradient
    """
    alpha = schedule.alpha(t)
    eps_hat = np.asarray(denoiser(z_t, t).eps_hat, dtype=float)
    scale = np.sqrt(1.0 - alpha)

    if form == "log_prob":
        _, grad = noisy_classifier_gradient(z_t, t, classifier_on_noisy, c)
        return eps_hat + scale * grad

    if form == "cross_entropy":
        if not hasattr(classifier_on_noisy, "probability_jacobian"):
            raise GradientUnavailableError("classifier has no probability_jacobian")
        probs = np.asarray(classifier_on_noisy.probabilities(z_t, t))
        jac = np.asarray(classifier_on_noisy.probability_jacobian(z_t, t))
        ce_grad = -jac[..., c, :] / probs[..., c, None]
        return eps_hat + scale * ce_grad

    raise InvalidRangeError(f"Unknown classifier guidance form: {form}")


def forward_guidance_gradient(
    z_t,
    t: int,
    denoiser_output: DenoiserOutput,
    spec: GuidanceSpec,
    schedule: NoiseSchedule,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    l(c, f(z0_hat)) and its gradient in z_t through z0_hat(z_t).

    d z0_hat / d z_t = (I - sqrt(1 - alpha_t) d eps / d z_t) / sqrt(alpha_t)
    """
    if denoiser_output.jacobian is None:
        raise MissingJacobianError("forward guidance needs the denoiser Jacobian")
    alpha = schedule.alpha(t)
    zb, single = as_batch(z_t, "z_t")
    eps_b, _ = as_batch(denoiser_output.eps_hat, "eps_hat")
    jac = as_batch_matrix(denoiser_output.jacobian)
    z0_hat = predict_z0(zb, eps_b, t, schedule)

    loss, grad_x = spec.loss_and_gradient(z0_hat)
    check_finite(loss, "forward guidance loss", batched=True, t=t)
    # (dz0/dz_t)^T g = (g - sqrt(1-a) J^T g) / sqrt(a)
    grad_z = (grad_x - np.sqrt(1.0 - alpha) * np.einsum("nji,nj->ni", jac, grad_x)) / np.sqrt(alpha)
    check_finite(grad_z, "forward guidance gradient", batched=True, t=t)
    return restore(loss, single), restore(grad_z, single)


def forward_guided_eps(
    z_t,
    t: int,
    denoiser_output: DenoiserOutput,
    spec: GuidanceSpec,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """eps_theta(z_t, t) + s(t) * grad_{z_t} l(c, f(z0_hat))."""
    eps_hat = np.asarray(denoiser_output.eps_hat, dtype=float)
    strength = spec.strength(schedule.alpha(t))
    if strength == 0.0:
        return eps_hat.copy()
    _, grad = forward_guidance_gradient(z_t, t, denoiser_output, spec, schedule)
    return eps_hat + strength * grad


@dataclass
class BackwardResult:
    """Outcome of the backward inner optimization."""
    delta: np.ndarray
    loss_history: np.ndarray
    rejected_steps: int = 0


def backward_descent(z0_hat, spec: GuidanceSpec, steps: Optional[int] = None) -> BackwardResult:
    """
    Gradient descent on delta -> l(c, f(z0_hat + delta)) from delta = 0.

    Each step halves the step size (at most MAX_HALVINGS times) until the
    loss does not increase; rows that still increase keep their iterate.

    Raises:
        NonFiniteError: If the loss or its gradient is NaN/inf
    """
    steps = spec.backward_steps if steps is None else steps
    zb, single = as_batch(z0_hat, "z0_hat")
    delta = np.zeros_like(zb)
    loss = spec.loss_value(zb)
    check_finite(loss, "backward guidance loss", batched=True)
    history = [loss]
    rejected = 0

    for _ in range(steps):
        current, grad = spec.loss_and_gradient(zb + delta)
        check_finite(grad, "backward guidance gradient", batched=True)
        step_size = np.full(zb.shape[0], spec.backward_step_size)
        accepted = np.zeros(zb.shape[0], dtype=bool)
        next_delta = delta.copy()
        next_loss = current.copy()
        for _ in range(MAX_HALVINGS + 1):
            trial = delta - step_size[:, None] * grad
            with np.errstate(invalid="ignore", over="ignore"):
                trial_loss = spec.loss_value(zb + trial)
            ok = ~accepted & np.isfinite(trial_loss) & (trial_loss <= current)
            next_delta[ok] = trial[ok]
            next_loss[ok] = trial_loss[ok]
            accepted |= ok
            if accepted.all():
                break
            step_size = np.where(accepted, step_size, 0.5 * step_size)
        rejected += int((~accepted).sum())
        delta, loss = next_delta, next_loss
        history.append(loss)

    if rejected:
        logger.debug(f"Backward descent kept {rejected} iterate(s) after {MAX_HALVINGS} halvings")
    loss_history = np.stack(history, axis=-1)
    return BackwardResult(
        delta=restore(delta, single),
        loss_history=restore(loss_history, single),
        rejected_steps=rejected,
    )


def backward_delta(z0_hat, spec: GuidanceSpec) -> np.ndarray:
    """
    Guided clean-space change delta_z0 after m gradient steps.

    Raises:
        InvalidRangeError: If spec.backward_steps is 0
    """
    if spec.backward_steps < 1:
        raise InvalidRangeError("backward_delta needs backward_steps >= 1")
    return backward_descent(z0_hat, spec).delta


def backward_guided_eps(eps_hat, delta_z0, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """eps_hat - sqrt(alpha_t / (1 - alpha_t)) * delta_z0."""
    alpha = schedule.alpha(t)
    if not 0.0 < alpha < 1.0:
        raise DegenerateScheduleError(f"backward guidance needs alpha_t in (0, 1), got {alpha}")
    eps = np.asarray(eps_hat, dtype=float)
    delta = np.asarray(delta_z0, dtype=float)
    if eps.shape != delta.shape:
        raise DimensionMismatchError(f"eps_hat {eps.shape} and delta_z0 {delta.shape} differ")
    return eps - np.sqrt(alpha / (1.0 - alpha)) * delta


@dataclass
class CombinedGuidance:
    """Result of applying a list of specs at one (t, n)."""
    eps_hat: np.ndarray
    delta_z0: np.ndarray
    z0_hat: np.ndarray
    forward_losses: np.ndarray
    backward_losses: np.ndarray


def combine_guidance(
    specs: Sequence[GuidanceSpec],
    z_t,
    t: int,
    denoiser_output: DenoiserOutput,
    schedule: NoiseSchedule,
) -> CombinedGuidance:
    """
    Apply every spec's forward and backward guidance at one step.

    Forward terms are summed with spec weights into eps_hat. Backward
    corrections are computed independently around the predicted clean
    point of the forward-guided eps_hat, summed, and folded in once.

    Errors from a spec are re-raised with its index attached.
    """
    if not specs:
        raise InvalidRangeError("combine_guidance needs at least one spec")
    zb, single = as_batch(z_t, "z_t")
    eps_raw, _ = as_batch(denoiser_output.eps_hat, "eps_hat")
    alpha = schedule.alpha(t)
    n = zb.shape[0]

    eps = eps_raw.copy()
    forward_losses = np.full((n, len(specs)), np.nan)
    for index, spec in enumerate(specs):
        strength = spec.strength(alpha)
        if strength == 0.0:
            continue
        with _annotate(index):
            if spec.noisy_world is not None:
                classifier = NoisyComponentClassifier(spec.noisy_world, schedule)
                loss, grad = noisy_classifier_gradient(zb, t, classifier, spec.prompt)
            else:
                loss, grad = forward_guidance_gradient(zb, t, denoiser_output, spec, schedule)
        forward_losses[:, index] = loss
        eps = eps + spec.weight * strength * grad

    z0_hat = predict_z0(zb, eps, t, schedule)
    delta = np.zeros_like(zb)
    backward_losses = np.full((n, len(specs)), np.nan)
    for index, spec in enumerate(specs):
        if not spec.uses_backward:
            continue
        with _annotate(index):
            result = backward_descent(z0_hat, spec)
        delta = delta + result.delta
        backward_losses[:, index] = result.loss_history[:, -1]

    if any(spec.uses_backward for spec in specs):
        eps = backward_guided_eps(eps, delta, t, schedule)
    check_finite(eps, "guided noise prediction", batched=True, t=t)
    return CombinedGuidance(
        eps_hat=restore(eps, single),
        delta_z0=restore(delta, single),
        z0_hat=restore(z0_hat, single),
        forward_losses=restore(forward_losses, single),
        backward_losses=restore(backward_losses, single),
    )


@contextmanager
def _annotate(index: int) -> Iterator[None]:
    """Attach a spec index to errors raised inside the block."""
    try:
        yield
    except NonFiniteError as err:
        raise err.with_context(spec_index=index) from err
    except UniversalGuidanceError as err:
        logger.error(f"Guidance spec {index} failed: {err}")
        raise


def spec_losses(specs: Sequence[GuidanceSpec], x) -> np.ndarray:
    """Loss of every spec at clean points x, shape (n, len(specs))."""
    xb, _ = as_batch(x, "x")
    if not specs:
        return np.zeros((xb.shape[0], 0))
    return np.stack([spec.loss_value(xb) for spec in specs], axis=1)
