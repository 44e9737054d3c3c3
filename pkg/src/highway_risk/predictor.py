"""Feedforward risk predictor trained with weighted cross-entropy, with
optional domain-adversarial feature alignment.

The network is a shared encoder followed by a risk classifier head, plus a
domain classifier head used only during adversarial training. Everything is
plain numpy in 64-bit precision: forward, backprop, and SGD with momentum
are implemented here so the gradients can be verified against central finite
differences.

Four training variants are supported: 'target-only', 'joint-no-adapt',
'dann' (adversarial loss routed through source and target features), and
'dann-source-only' (adversarial gradient reaches the encoder only through
the source features).
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .metrics import LOG_CLAMP, nll
from .risk_estimator import WeightedSample
from .validation import NumericalError, as_rng, check_feature_matrix

VARIANTS = ("target-only", "joint-no-adapt", "dann", "dann-source-only")

ENCODER_CHOICES = ((512, 256, 128, 64), (256, 128, 64), (128, 64))
CLASSIFIER_CHOICES = ((), (64,), (64, 64))


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: encoder and classifier hidden sizes, domain head sizes,
    and the dropout keep probability for hidden activations."""

    encoder: tuple = (128, 64)
    classifier: tuple = ()
    domain: tuple = (64, 64)
    dropout_keep: float = 1.0

    def __post_init__(self):
        if not (0.5 <= self.dropout_keep <= 1.0):
            raise ValueError("dropout keep probability must lie in [0.5, 1]")
        for sizes in (self.encoder, self.classifier, self.domain):
            if any(s < 1 for s in sizes):
                raise ValueError("all layer sizes must be >= 1")


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Mlp:
    """Encoder + classifier + domain head with explicit parameters."""

    def __init__(self, input_dim, spec, rng):
        rng = as_rng(rng)
        self.input_dim = input_dim
        self.spec = spec
        self.params = {}
        self.chains = {}
        enc_out = spec.encoder[-1] if spec.encoder else input_dim
        self._build("enc", [input_dim, *spec.encoder], rng, final_linear=False)
        self._build("cls", [enc_out, *spec.classifier, 1], rng, final_linear=True)
        self._build("dom", [enc_out, *spec.domain, 1], rng, final_linear=True)
        self.param_names = sorted(self.params)

    def _build(self, chain, dims, rng, final_linear):
        layers = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            last = i == len(dims) - 2
            scale = np.sqrt(1.0 / fan_in) if (final_linear and last) \
                else np.sqrt(2.0 / fan_in)
            self.params[f"{chain}{i}_W"] = rng.normal(0.0, scale, (fan_in, fan_out))
            self.params[f"{chain}{i}_b"] = np.zeros(fan_out)
            layers.append(i)
        self.chains[chain] = layers

    # -- forward / backward over one chain --------------------------------

    def _chain_forward(self, chain, x, final_sigmoid, training, rng, dropout):
        """Run one chain. final_sigmoid=False leaves the last layer linear
        (logits for the classifier and domain heads, features for the
        encoder whose layers are all hidden)."""
        cache = []
        a = x
        layers = self.chains[chain]
        head = chain in ("cls", "dom")
        for i in layers:
            w, b = self.params[f"{chain}{i}_W"], self.params[f"{chain}{i}_b"]
            z = a @ w + b
            last = i == layers[-1]
            if last and head:
                out = _sigmoid(z) if final_sigmoid else z
                cache.append((a, z, None))
                return out, cache
            h = _relu(z)
            mask = None
            if dropout and training and self.spec.dropout_keep < 1.0:
                keep = self.spec.dropout_keep
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
            cache.append((a, z, mask))
            a = h
        return a, cache

    def _chain_backward(self, chain, dout, cache, grads):
        """Backpropagate through one chain; dout is the gradient at the
        chain's output (logits for heads, features for the encoder)."""
        layers = self.chains[chain]
        head = chain in ("cls", "dom")
        da = dout
        for idx in range(len(layers) - 1, -1, -1):
            i = layers[idx]
            a, z, mask = cache[idx]
            last = idx == len(layers) - 1
            if last and head:
                dz = da
            else:
                if mask is not None:
                    da = da * mask
                dz = da * (z > 0)
            grads[f"{chain}{i}_W"] = grads.get(f"{chain}{i}_W", 0) + a.T @ dz
            grads[f"{chain}{i}_b"] = grads.get(f"{chain}{i}_b", 0) + dz.sum(axis=0)
            da = dz @ self.params[f"{chain}{i}_W"].T
        return da

    def encode(self, x, training=False, rng=None):
        return self._chain_forward("enc", x, final_sigmoid=False,
                                   training=training, rng=rng, dropout=True)

    def classify_logits(self, features, training=False, rng=None):
        out, cache = self._chain_forward("cls", features, final_sigmoid=False,
                                         training=training, rng=rng,
                                         dropout=True)
        return out[:, 0], cache

    def domain_logits(self, features):
        out, cache = self._chain_forward("dom", features, final_sigmoid=False,
                                         training=False, rng=None,
                                         dropout=False)
        return out[:, 0], cache

    def forward(self, x, training=False, rng=None):
        """Risk probability in (0, 1) per row of x."""
        x = check_feature_matrix(x, expected_dim=self.input_dim)
        features, _ = self.encode(x, training=training, rng=rng)
        logits, _ = self.classify_logits(features, training=training, rng=rng)
        return _sigmoid(logits)

    def snapshot(self):
        return {k: v.copy() for k, v in self.params.items()}

    def restore(self, snapshot):
        for k, v in snapshot.items():
            self.params[k] = v.copy()


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def weighted_cross_entropy(preds, labels, weights):
    """Weighted cross-entropy summed over the batch and divided by the batch
    size (a scale convention, not a weighted mean). Predictions clamp to
    [1e-7, 1 - 1e-7] inside the logs."""
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("sample weights must be non-negative")
    p = np.clip(preds, LOG_CLAMP, 1.0 - LOG_CLAMP)
    xent = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float(np.sum(weights * xent) / len(preds))


def _xent_from_logits(logits, labels, weights):
    """Same quantity evaluated stably from logits: softplus(z) - y z per
    sample. Exact for all finite logits (no flat clamp region), so its
    gradient w(sigmoid(z) - y)/n never vanishes on mispredictions."""
    per_sample = np.logaddexp(0.0, logits) - labels * logits
    return float(np.sum(weights * per_sample) / len(logits))


def _d_xent_from_logits(logits, labels, weights):
    return weights * (_sigmoid(logits) - labels) / len(logits)


def domain_adversarial_loss(domain_src, domain_tgt):
    """Adversarial alignment loss: -mean log D(source) - mean log(1 - D(target)).

    The predictor minimizes this quantity; the domain head is trained to
    minimize its negative.
    """
    ds = np.clip(np.asarray(domain_src, dtype=float), LOG_CLAMP, 1.0 - LOG_CLAMP)
    dt = np.clip(np.asarray(domain_tgt, dtype=float), LOG_CLAMP, 1.0 - LOG_CLAMP)
    return float(-np.mean(np.log(ds)) - np.mean(np.log(1.0 - dt)))


def _adv_from_logits(logits_src, logits_tgt):
    return float(np.mean(np.logaddexp(0.0, -logits_src))
                 + np.mean(np.logaddexp(0.0, logits_tgt)))


def _d_adv_from_logits(logits_src, logits_tgt):
    g_s = (_sigmoid(logits_src) - 1.0) / len(logits_src)
    g_t = _sigmoid(logits_tgt) / len(logits_tgt)
    return g_s, g_t


def predictor_loss_and_grads(net, x_src, y_src, w_src, x_tgt, y_tgt, w_tgt,
                             lam=0.0, variant="joint-no-adapt",
                             training=False, rng=None):
    """Full predictor objective and its gradients.

    Returns (loss, pred_loss, adv_loss, grads) where grads covers the encoder
    and classifier, plus the domain head's contribution through the combined
    objective when the adversarial term is active. In 'dann-source-only' the
    adversarial gradient reaches the encoder only through the source slice.
    """
    n_src = len(x_src)
    x_all = np.vstack([x_src, x_tgt]) if n_src else np.asarray(x_tgt)
    y_all = np.concatenate([y_src, y_tgt]) if n_src else np.asarray(y_tgt)
    w_all = np.concatenate([w_src, w_tgt]) if n_src else np.asarray(w_tgt)
    if np.any(w_all < 0):
        raise ValueError("sample weights must be non-negative")

    features, enc_cache = net.encode(x_all, training=training, rng=rng)
    logits, cls_cache = net.classify_logits(features, training=training,
                                            rng=rng)
    pred_loss = _xent_from_logits(logits, y_all, w_all)

    grads = {}
    d_logits = _d_xent_from_logits(logits, y_all, w_all)
    d_features = net._chain_backward("cls", d_logits[:, None], cls_cache,
                                     grads)

    adv_loss = 0.0
    adversarial = lam > 0 and variant in ("dann", "dann-source-only") and n_src
    if adversarial:
        z_src, dom_cache_s = net.domain_logits(features[:n_src])
        z_tgt, dom_cache_t = net.domain_logits(features[n_src:])
        adv_loss = _adv_from_logits(z_src, z_tgt)
        g_s, g_t = _d_adv_from_logits(z_src, z_tgt)
        d_feat_s = net._chain_backward("dom", g_s[:, None], dom_cache_s, grads)
        d_feat_t = net._chain_backward("dom", g_t[:, None], dom_cache_t, grads)
        for name in list(grads):
            if name.startswith("dom"):
                grads[name] = grads[name] * lam
        d_features[:n_src] += lam * d_feat_s
        if variant == "dann":
            d_features[n_src:] += lam * d_feat_t

    net._chain_backward("enc", d_features, enc_cache, grads)
    loss = pred_loss + lam * adv_loss if adversarial else pred_loss
    return loss, pred_loss, adv_loss, grads


def discriminator_loss_and_grads(net, x_src, x_tgt):
    """Domain-head objective (the negative adversarial loss) and its
    gradients with respect to the domain head only."""
    features_s, _ = net.encode(x_src, training=False)
    features_t, _ = net.encode(x_tgt, training=False)
    z_src, cache_s = net.domain_logits(features_s)
    z_tgt, cache_t = net.domain_logits(features_t)
    loss = -_adv_from_logits(z_src, z_tgt)
    g_s, g_t = _d_adv_from_logits(z_src, z_tgt)
    grads = {}
    net._chain_backward("dom", -g_s[:, None], cache_s, grads)
    net._chain_backward("dom", -g_t[:, None], cache_t, grads)
    return loss, {k: v for k, v in grads.items() if k.startswith("dom")}


# ----------------------------------------------------------------------
# gradient verification
# ----------------------------------------------------------------------

def _loss_with_signature(net, batch, lam, variant, frozen_target_features=None):
    """Loss value plus the ReLU sign signature of the evaluation. Central
    differences are only valid when both perturbed evaluations share the
    signature (the logit-space losses themselves are smooth).

    For 'dann-source-only' the adversarial term treats the target features as
    a constant, so the caller passes the base-point target features in.
    """
    n_src = len(batch["x_src"])
    x_all = (np.vstack([batch["x_src"], batch["x_tgt"]])
             if n_src else np.asarray(batch["x_tgt"]))
    y_all = (np.concatenate([batch["y_src"], batch["y_tgt"]])
             if n_src else np.asarray(batch["y_tgt"]))
    w_all = (np.concatenate([batch["w_src"], batch["w_tgt"]])
             if n_src else np.asarray(batch["w_tgt"]))

    signature = []
    features, enc_cache = net.encode(x_all)
    logits, cls_cache = net.classify_logits(features)
    for _, z, _ in enc_cache + cls_cache[:-1]:
        signature.append(z > 0)
    loss = _xent_from_logits(logits, y_all, w_all)

    if lam > 0 and n_src:
        target_features = features[n_src:]
        if frozen_target_features is not None:
            target_features = frozen_target_features
        z_src, dom_cache_s = net.domain_logits(features[:n_src])
        z_tgt, dom_cache_t = net.domain_logits(target_features)
        for cache in (dom_cache_s, dom_cache_t):
            for _, z, _ in cache[:-1]:
                signature.append(z > 0)
        loss += lam * _adv_from_logits(z_src, z_tgt)
    return loss, signature


def _signatures_match(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(net, batch, step=1e-5, lam=0.0, variant="dann",
               components_per_tensor=8, rng=None):
    """Max relative error between analytic gradients and central finite
    differences over a random subset of parameter components.

    Components whose perturbation crosses a ReLU or log-clamp boundary are
    redrawn: the central-difference estimate is undefined across such kinks
    while the analytic gradient remains valid on either side. Dropout is
    disabled; run in 64-bit precision.
    """
    rng = as_rng(rng)
    _, _, _, grads = predictor_loss_and_grads(
        net, batch["x_src"], batch["y_src"], batch["w_src"],
        batch["x_tgt"], batch["y_tgt"], batch["w_tgt"],
        lam=lam, variant=variant, training=False)
    frozen = None
    if variant == "dann-source-only" and lam > 0 and len(batch["x_src"]):
        frozen = net.encode(np.asarray(batch["x_tgt"]))[0].copy()
    worst = 0.0
    for name in net.param_names:
        tensor = net.params[name]
        analytic = np.asarray(grads.get(name, np.zeros_like(tensor)))
        n_checks = min(components_per_tensor, tensor.size)
        candidates = list(rng.permutation(tensor.size))
        checked = 0
        while checked < n_checks and candidates:
            j = int(candidates.pop())
            original = tensor.flat[j]
            tensor.flat[j] = original + step
            f_plus, sig_plus = _loss_with_signature(net, batch, lam, variant,
                                                    frozen)
            tensor.flat[j] = original - step
            f_minus, sig_minus = _loss_with_signature(net, batch, lam, variant,
                                                      frozen)
            tensor.flat[j] = original
            if not _signatures_match(sig_plus, sig_minus):
                continue  # kink crossed; this component's estimate is invalid
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic.flat[j] if analytic.size else 0.0
            denom = max(abs(a), abs(numeric), 1e-6)
            if max(abs(a), abs(numeric)) > 1e-12:
                worst = max(worst, abs(a - numeric) / denom)
            checked += 1
    return worst


# ----------------------------------------------------------------------
# label binarization
# ----------------------------------------------------------------------

def binarize_labels(samples, rng):
    """Bernoulli-sample each continuous risk label into {0, 1}, mimicking
    real-world data where only the outcome is observed."""
    rng = as_rng(rng)
    out = []
    for s in samples:
        out.append(WeightedSample(
            x=s.x, y=float(rng.random() < s.y), w=s.w, domain=s.domain,
            scene_id=s.scene_id, ego_id=s.ego_id,
            collision_steps=s.collision_steps,
        ))
    return out


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

def _as_arrays(samples):
    if not samples:
        return np.zeros((0, 0)), np.zeros(0), np.zeros(0)
    x = np.stack([s.x for s in samples]).astype(float)
    y = np.asarray([s.y for s in samples], dtype=float)
    w = np.asarray([s.w for s in samples], dtype=float)
    return x, y, w


class RiskPredictor(BaseEstimator):
    """Risk prediction estimator with a fit/predict interface.

    Parameters mirror the training setup: architecture sizes, dropout keep
    probability, SGD settings, the training variant, and the adversarial
    weight. Fitting standardizes features (statistics from the source set
    when present), optimizes with momentum SGD while recording per-epoch
    validation metrics, and keeps the parameters from the best epoch.
    """

    def __init__(self, encoder=(128, 64), classifier=(), domain=(64, 64),
                 dropout_keep=1.0, learning_rate=3e-4, momentum=0.9,
                 adversarial_weight=0.0, variant="joint-no-adapt", epochs=30,
                 batch_size=64, seed=0, selection_metric="nll_all"):
        self.encoder = encoder
        self.classifier = classifier
        self.domain = domain
        self.dropout_keep = dropout_keep
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.adversarial_weight = adversarial_weight
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.selection_metric = selection_metric

    def fit(self, source, target, validation):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'")
        if not target:
            raise ValueError("training requires target-domain samples")
        if self.variant != "target-only" and not source:
            raise ValueError(f"variant '{self.variant}' requires source samples")
        use_source = self.variant != "target-only" and bool(source)

        x_src, y_src, w_src = _as_arrays(source if use_source else [])
        x_tgt, y_tgt, w_tgt = _as_arrays(target)
        x_val, y_val, w_val = _as_arrays(validation)

        stats_x = x_src if use_source and len(x_src) else x_tgt
        self.mean_ = stats_x.mean(axis=0)
        scale = stats_x.std(axis=0)
        self.scale_ = np.where(scale > 0, scale, 1.0)
        x_src = self._standardize(x_src) if len(x_src) else x_src
        x_tgt = self._standardize(x_tgt)
        x_val = self._standardize(x_val) if len(x_val) else x_val

        rng = as_rng(self.seed)
        spec = MlpSpec(encoder=tuple(self.encoder),
                       classifier=tuple(self.classifier),
                       domain=tuple(self.domain),
                       dropout_keep=self.dropout_keep)
        net = Mlp(x_tgt.shape[1], spec, rng)
        velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
        adversarial = (self.adversarial_weight > 0
                       and self.variant in ("dann", "dann-source-only"))
        lam = self.adversarial_weight if adversarial else 0.0

        n_src, n_tgt = len(x_src), len(x_tgt)
        steps = int(np.ceil(max(n_src if use_source else 0, n_tgt)
                            / self.batch_size))
        self.log_ = []
        best_metric, best_snapshot, best_epoch = np.inf, net.snapshot(), -1

        for epoch in range(self.epochs):
            perm_src = rng.permutation(n_src) if use_source else None
            perm_tgt = rng.permutation(n_tgt)
            epoch_loss = 0.0
            for b in range(steps):
                lo = b * self.batch_size
                take = np.arange(lo, lo + self.batch_size)
                bt = perm_tgt[take % n_tgt]
                if use_source:
                    bs = perm_src[take % n_src]
                    xs, ys, ws = x_src[bs], y_src[bs], w_src[bs]
                else:
                    xs = np.zeros((0, x_tgt.shape[1]))
                    ys = ws = np.zeros(0)
                if adversarial:
                    _, d_grads = discriminator_loss_and_grads(net, xs, x_tgt[bt])
                    self._sgd_step(net, velocity, d_grads)
                loss, _, _, grads = predictor_loss_and_grads(
                    net, xs, ys, ws, x_tgt[bt], y_tgt[bt], w_tgt[bt],
                    lam=lam, variant=self.variant, training=True, rng=rng)
                if not np.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} batch {b}")
                self._sgd_step(
                    net, velocity,
                    {k: v for k, v in grads.items() if not k.startswith("dom")})
                if not all(np.all(np.isfinite(v)) for v in net.params.values()):
                    raise NumericalError(
                        f"non-finite parameters at epoch {epoch} batch {b}")
                epoch_loss += loss
            entry = {"epoch": epoch, "train_loss": epoch_loss / steps}
            if len(x_val):
                preds = net.forward(x_val)
                entry["nll_all"] = nll(preds, y_val, w_val)
                entry["nll_positive"] = (
                    nll(preds, y_val, w_val, subset="positive-risk")
                    if np.any(y_val > 0) else None)
                metric = entry[self.selection_metric]
                if metric is None:
                    raise ValueError(
                        f"selection metric '{self.selection_metric}' unavailable")
                if metric < best_metric:
                    best_metric, best_snapshot = metric, net.snapshot()
                    best_epoch = epoch
            self.log_.append(entry)

        if len(x_val):
            net.restore(best_snapshot)
        self.net_ = net
        self.best_epoch_ = best_epoch
        self.input_dim_ = x_tgt.shape[1]
        return self

    def _standardize(self, x):
        return (x - self.mean_) / self.scale_

    def _sgd_step(self, net, velocity, grads):
        for name, g in grads.items():
            velocity[name] = self.momentum * velocity[name] - self.learning_rate * g
            net.params[name] = net.params[name] + velocity[name]

    def predict_proba(self, x):
        x = check_feature_matrix(x, expected_dim=self.input_dim_)
        return self.net_.forward(self._standardize(x))

    def predict(self, x):
        return self.predict_proba(x)

    # -- persistence -----------------------------------------------------

    def save(self, path, schema_digest=""):
        import json

        meta = {
            "params": self.get_params(),
            "input_dim": self.input_dim_,
            "best_epoch": self.best_epoch_,
            "schema_digest": schema_digest,
            "log": self.log_,
        }
        arrays = {f"param_{k}": v for k, v in self.net_.params.items()}
        np.savez(path, meta=json.dumps(meta), mean=self.mean_,
                 scale=self.scale_, **arrays)

    @classmethod
    def load(cls, path):
        import json

        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            params = meta["params"]
            for key in ("encoder", "classifier", "domain"):
                params[key] = tuple(params[key])
            model = cls(**params)
            model.mean_ = data["mean"]
            model.scale_ = data["scale"]
            model.input_dim_ = int(meta["input_dim"])
            model.best_epoch_ = meta["best_epoch"]
            model.log_ = meta["log"]
            spec = MlpSpec(encoder=params["encoder"],
                           classifier=params["classifier"],
                           domain=params["domain"],
                           dropout_keep=params["dropout_keep"])
            net = Mlp(model.input_dim_, spec, np.random.default_rng(0))
            for k in net.params:
                net.params[k] = data[f"param_{k}"]
            model.net_ = net
            model.schema_digest_ = meta.get("schema_digest", "")
        return model
