"""Spot detection: FCN scorer, training loop, density map, local maxima.

The network mirrors the contract of a 4-step contractive / 4-step
expansive fully convolutional segmenter with skip fusion and a 2-channel
pixelwise head (channel 0 = foreground, channel 1 = background). Torch
supplies the tensor/autograd machinery; the tests verify the forward pass
against a direct-convolution oracle and every gradient against central
finite differences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

TOTAL_STRIDE = 16  # four 2x downsamplings


class PadRequiredError(ValueError):
    """Input spatial size not divisible by the total stride."""


class TrainingDiverged(RuntimeError):
    pass


class FCNModel(nn.Module):
    """Contractive/expansive pixel scorer.

    Contractive: 4 x (3x3 conv + ReLU + 2x2 max pool), feature width
    doubling from base_dim. Expansive: 4 x (2x bilinear upsample + skip
    fusion by addition after a 1x1 channel-matching conv + 3x3 conv
    halving the width). Head: 1x1 conv to 2 channels.
    """

    def __init__(self, base_dim: int = 8, seed: int = 0, dtype=torch.float64):
        super().__init__()
        torch.manual_seed(seed)
        dims = [base_dim * 2**i for i in range(4)]  # e.g. 8, 16, 32, 64
        in_ch = [3] + dims[:-1]
        self.down_convs = nn.ModuleList(
            [nn.Conv2d(in_ch[i], dims[i], 3, padding=1) for i in range(4)]
        )
        up_in = dims[::-1]  # 64, 32, 16, 8
        up_out = [dims[2], dims[1], dims[0], dims[0]]  # 32, 16, 8, 8
        self.skip_convs = nn.ModuleList(
            [nn.Conv2d(up_in[i], up_in[i], 1) for i in range(4)]
        )
        self.up_convs = nn.ModuleList(
            [nn.Conv2d(up_in[i], up_out[i], 3, padding=1) for i in range(4)]
        )
        self.head = nn.Conv2d(up_out[-1], 2, 1)
        self.base_dim = base_dim
        self.to(dtype)

    def forward(self, x: torch.Tensor, kink_margins: list | None = None) -> torch.Tensor:
        if x.shape[-1] % TOTAL_STRIDE or x.shape[-2] % TOTAL_STRIDE:
            raise PadRequiredError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by {TOTAL_STRIDE}"
            )

        def relu(pre):
            # |pre-activation| is the distance to the nearest ReLU kink;
            # gradient checking needs evaluation points away from kinks.
            if kink_margins is not None:
                kink_margins.append(float(pre.detach().abs().min()))
            return F.relu(pre)

        skips = []
        for conv in self.down_convs:
            x = relu(conv(x))
            skips.append(x)
            x = F.max_pool2d(x, 2)
        for i, (skip_conv, up_conv) in enumerate(zip(self.skip_convs, self.up_convs)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = x + skip_conv(skips[-1 - i])
            x = relu(up_conv(x))
        return self.head(x)

    @property
    def dtype(self):
        return next(self.parameters()).dtype


def _to_tensor(image: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].to(dtype)


def fcn_forward(model: FCNModel, image: np.ndarray) -> np.ndarray:
    """Score an HxWx3 image in [0,1]; returns HxWx2 (foreground, background)."""
    with torch.no_grad():
        out = model(_to_tensor(image, model.dtype))
    return out[0].permute(1, 2, 0).numpy()


def pad_to_stride(image: np.ndarray):
    """Reflect-pad so both spatial dims divide the total stride.

    Returns (padded, (pad_bottom, pad_right)) for cropping scores back.
    """
    h, w = image.shape[:2]
    pb = (-h) % TOTAL_STRIDE
    pr = (-w) % TOTAL_STRIDE
    if pb or pr:
        image = np.pad(image, ((0, pb), (0, pr), (0, 0)), mode="reflect")
    return image, (pb, pr)


def fcn_forward_padded(model: FCNModel, image: np.ndarray) -> np.ndarray:
    padded, (pb, pr) = pad_to_stride(image)
    scores = fcn_forward(model, padded)
    h, w = image.shape[:2]
    return scores[:h, :w]


def softmax_loss(scores: np.ndarray, labels: np.ndarray, class_weights=(1.0, 1.0)):
    """Weighted mean per-pixel cross-entropy after softmax, with exact gradient.

    scores: HxWx2 (foreground, background); labels: HxW in {0,1} with 1 =
    foreground. class_weights = (background weight, foreground weight).
    Returns (loss, grad wrt scores).
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    n = h * w
    s = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=2, keepdims=True)
    # channel 0 is foreground: label 1 -> channel 0.
    chan = np.where(labels == 1, 0, 1)
    wgt = np.where(labels == 1, class_weights[1], class_weights[0])
    p_true = np.take_along_axis(p, chan[:, :, None], axis=2)[:, :, 0]
    loss = float(np.mean(wgt * -np.log(np.maximum(p_true, 1e-300))))
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, chan[:, :, None], 1.0, axis=2)
    grad = wgt[:, :, None] * (p - onehot) / n
    return loss, grad


def _torch_loss(scores: torch.Tensor, labels: torch.Tensor, class_weights) -> torch.Tensor:
    """Same loss as softmax_loss, in torch (scores: 1x2xHxW, labels: HxW)."""
    logp = F.log_softmax(scores[0], dim=0)
    chan = torch.where(labels == 1, 0, 1)
    wgt = torch.where(labels == 1, class_weights[1], class_weights[0])
    picked = logp.gather(0, chan[None])[0]
    return (-wgt * picked).mean()


@dataclass
class TrainConfig:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    coarse_lr: float = 0.05
    coarse_iters: int = 300
    fine_lr: float = 0.01
    fine_iters: int = 150
    batch_size: int = 4
    seed: int = 0
    base_dim: int = 8

    def __post_init__(self):
        if self.coarse_lr <= 0 or self.fine_lr <= 0:
            raise ValueError("learning rates must be positive")


def class_weights_from_dataset(dataset):
    """Inverse-frequency weights (background, foreground)."""
    fg = sum(int(m.sum()) for _, m in dataset)
    total = sum(m.size for _, m in dataset)
    bg = total - fg
    fg = max(fg, 1)
    bg = max(bg, 1)
    return (total / (2.0 * bg), total / (2.0 * fg))


def train_fcn(model: FCNModel, dataset, config: TrainConfig):
    """Two-stage SGD (momentum + L2 weight decay) over (image, mask) pairs.

    Returns (model, loss_curve) where loss_curve rows are
    (iteration, loss, lr). Deterministic for a fixed config.seed.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    dtype = model.dtype
    weights = class_weights_from_dataset(dataset)
    w_t = torch.tensor(weights, dtype=dtype)

    tensors = [
        (_to_tensor(img, dtype), torch.from_numpy(np.ascontiguousarray(mask)).long())
        for img, mask in dataset
    ]
    curve = []
    iteration = 0
    for lr, iters in ((config.coarse_lr, config.coarse_iters), (config.fine_lr, config.fine_iters)):
        opt = torch.optim.SGD(
            model.parameters(), lr=lr, momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        for _ in range(iters):
            idx = rng.integers(0, len(tensors), size=config.batch_size)
            opt.zero_grad()
            loss_sum = 0.0
            for k in idx:
                img, mask = tensors[int(k)]
                loss = _torch_loss(model(img), mask, w_t) / config.batch_size
                loss.backward()
                loss_sum += float(loss.detach())
            if not np.isfinite(loss_sum):
                raise TrainingDiverged(f"loss became {loss_sum} at iteration {iteration}")
            opt.step()
            curve.append((iteration, loss_sum, lr))
            iteration += 1
    return model, curve


def save_loss_curve(path, curve):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss", "lr"])
        w.writerows(curve)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: FCNModel):
    """Versioned .npz tensor dump: keys are state_dict names, plus metadata."""
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    np.savez(path, __version__=CHECKPOINT_VERSION, __base_dim__=model.base_dim, **arrays)


def load_checkpoint(path, dtype=torch.float64) -> FCNModel:
    data = np.load(path)
    if int(data["__version__"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data['__version__']}")
    model = FCNModel(base_dim=int(data["__base_dim__"]), dtype=dtype)
    state = {
        k: torch.from_numpy(data[k]).to(dtype)
        for k in data.files
        if not k.startswith("__")
    }
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# Density map and local-maxima extraction


def density_map(scores: np.ndarray) -> np.ndarray:
    """Foreground minus background score, pointwise."""
    return scores[:, :, 0] - scores[:, :, 1]


@dataclass
class SpotDetection:
    centers: np.ndarray  # (N, 2) subpixel (x, y)
    scores: np.ndarray  # (N,)
    rgb: np.ndarray  # (N, 3)

    def __len__(self):
        return len(self.centers)


def _subpixel_offset(patch: np.ndarray):
    """Quadratic-fit peak offset from the centre of a 3x3 patch."""
    dx = 0.5 * (patch[1, 2] - patch[1, 0])
    dy = 0.5 * (patch[2, 1] - patch[0, 1])
    dxx = patch[1, 2] - 2 * patch[1, 1] + patch[1, 0]
    dyy = patch[2, 1] - 2 * patch[1, 1] + patch[0, 1]
    dxy = 0.25 * (patch[2, 2] - patch[2, 0] - patch[0, 2] + patch[0, 0])
    H = np.array([[dxx, dxy], [dxy, dyy]])
    if np.linalg.det(H) == 0:
        return 0.0, 0.0
    off = -np.linalg.solve(H, np.array([dx, dy]))
    return tuple(np.clip(off, -1.0, 1.0))


def _disk_mean_rgb(image: np.ndarray, center, radius: float = 2.0) -> np.ndarray:
    h, w = image.shape[:2]
    cx, cy = center
    x0, x1 = int(max(0, np.floor(cx - radius))), int(min(w, np.ceil(cx + radius) + 1))
    y0, y1 = int(max(0, np.floor(cy - radius))), int(min(h, np.ceil(cy + radius) + 1))
    if x1 <= x0 or y1 <= y0:
        return np.zeros(3)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    if not mask.any():
        return np.zeros(3)
    return image[y0:y1, x0:x1][mask].mean(axis=0)


def detect_spots(
    density: np.ndarray,
    nms_radius: float = 4.0,
    threshold: float = 0.0,
    image: np.ndarray | None = None,
    rgb_radius: float = 2.0,
) -> SpotDetection:
    """Thresholded local maxima of the density map, greedily suppressed.

    Subpixel refinement by a quadratic fit over the 3x3 neighbourhood; each
    detection carries the mean RGB of a small disk around its centre (zeros
    when no image is supplied).
    """
    if nms_radius < 1:
        raise ValueError("nms_radius must be >= 1")
    size = 2 * int(np.ceil(nms_radius)) + 1
    local_max = (density == ndimage.maximum_filter(density, size=size)) & (density > threshold)
    ys, xs = np.nonzero(local_max)
    order = np.argsort(density[ys, xs])[::-1]
    ys, xs = ys[order], xs[order]

    kept = []
    for y, x in zip(ys, xs):
        if any((x - kx) ** 2 + (y - ky) ** 2 < nms_radius**2 for kx, ky in kept):
            continue
        kept.append((x, y))

    centers, scores, rgbs = [], [], []
    h, w = density.shape
    for x, y in kept:
        if 1 <= x < w - 1 and 1 <= y < h - 1:
            ox, oy = _subpixel_offset(density[y - 1 : y + 2, x - 1 : x + 2])
        else:
            ox = oy = 0.0
        cx, cy = x + ox, y + oy
        centers.append((cx, cy))
        scores.append(density[y, x])
        rgbs.append(_disk_mean_rgb(image, (cx, cy), rgb_radius) if image is not None else np.zeros(3))
    return SpotDetection(
        centers=np.array(centers).reshape(-1, 2),
        scores=np.array(scores),
        rgb=np.array(rgbs).reshape(-1, 3),
    )


def baseline_detect(
    image: np.ndarray,
    dog_sigmas=(1.2, 2.8),
    threshold: float = 0.02,
    nms_radius: float = 4.0,
) -> SpotDetection:
    """Difference-of-Gaussians blob detector, FCN-independent fallback."""
    gray = np.asarray(image, dtype=float).max(axis=2)
    s1, s2 = dog_sigmas
    dog = ndimage.gaussian_filter(gray, s1) - ndimage.gaussian_filter(gray, s2)
    return detect_spots(dog, nms_radius=nms_radius, threshold=threshold, image=image)


def fcn_detect(
    model: FCNModel,
    image: np.ndarray,
    threshold: float = 0.0,
    nms_radius: float = 4.0,
) -> SpotDetection:
    """Full FCN path: forward (padding if needed), density map, local maxima."""
    scores = fcn_forward_padded(model, image)
    return detect_spots(density_map(scores), nms_radius=nms_radius, threshold=threshold, image=image)


# ---------------------------------------------------------------------------
# Gradient checking


def gradient_check(
    model: FCNModel,
    image: np.ndarray,
    labels: np.ndarray,
    class_weights=(1.0, 1.0),
    samples_per_param: int = 3,
    h: float = 1e-6,
    seed: int = 0,
):
    """Central finite differences vs autograd, per parameter tensor.

    Returns {parameter name: max relative error over sampled entries}.
    The finite-difference side touches only the forward pass. Entries are
    sampled among those with at least 10% of the tensor's peak gradient
    magnitude: near-zero entries measure only floating-point roundoff of
    the difference quotient, not the correctness of the gradient.

    Each sample walks a ladder of steps (h, 10h, 100h) and accepts the
    smallest one where the quotients at that step and half of it agree;
    for a smooth loss they agree to O(step^2), so disagreement means the
    quotient is dominated by either roundoff (small steps, tiny gradients)
    or a ReLU kink inside the interval (large steps), neither of which
    measures the gradient. A kink lying essentially at the evaluation
    point itself leaves the quotients mutually consistent (they all return
    the average of the two one-sided slopes) while autograd returns one
    side; it is caught through the symmetric second difference
    (lp + lm - 2*l0)/step, which is constant in step at such a kink but
    shrinks linearly for a smooth loss. Unmeasurable entries are skipped.

    The loss itself is only piecewise smooth: where some pre-activation is
    exactly zero the derivative does not exist and a central difference
    returns the average of the two one-sided slopes no matter how small h
    is, while autograd returns one of them. The probe image is therefore
    chosen among jittered candidates to maximize the smallest
    pre-activation magnitude, which must stay large compared to what a
    parameter step of h can move it.
    """
    rng = np.random.default_rng(seed)
    dtype = model.dtype
    image = np.asarray(image, dtype=float)
    probe, probe_margin = image, 0.0
    for attempt in range(20):
        candidate = image if attempt == 0 else np.clip(
            image + rng.normal(0.0, 0.02, image.shape), 0.0, 1.0)
        margins: list = []
        with torch.no_grad():
            model(_to_tensor(candidate, dtype), kink_margins=margins)
        if min(margins) > probe_margin:
            probe, probe_margin = candidate, min(margins)
    if probe_margin < 10 * h:
        raise RuntimeError("could not find a probe image clear of ReLU kinks")
    img_t = _to_tensor(probe, dtype)
    lbl_t = torch.from_numpy(np.ascontiguousarray(labels)).long()
    w_t = torch.tensor(class_weights, dtype=dtype)

    model.zero_grad()
    loss = _torch_loss(model(img_t), lbl_t, w_t)
    loss.backward()

    def eval_loss():
        with torch.no_grad():
            return float(_torch_loss(model(img_t), lbl_t, w_t))

    l0 = eval_loss()
    eps_floor = 8 * np.finfo(float).eps * max(abs(l0), 1.0)

    report = {}
    for name, param in model.named_parameters():
        flat = param.data.view(-1)
        grad = param.grad.view(-1)
        gmax = float(grad.abs().max())
        significant = (grad.abs() >= 0.1 * gmax).nonzero().view(-1).numpy()
        if significant.size == 0:
            significant = np.arange(flat.numel())

        def probe(i, step):
            orig = float(flat[i])
            flat[i] = orig + step
            lp = eval_loss()
            flat[i] = orig - step
            lm = eval_loss()
            flat[i] = orig
            return lp, lm

        worst = 0.0
        taken = 0
        for _ in range(8 * samples_per_param):
            if taken == samples_per_param:
                break
            i = int(rng.choice(significant))
            estimate = None
            for step in (h, 10 * h, 100 * h):
                lp1, lm1 = probe(i, step)
                lp2, lm2 = probe(i, step / 2)
                fd = (lp1 - lm1) / (2 * step)
                fd_half = (lp2 - lm2) / step
                asym = abs(lp1 + lm1 - 2 * l0) / step
                asym_half = abs(lp2 + lm2 - 2 * l0) / (step / 2)
                if asym > 10 * eps_floor / step and asym_half > 0.6 * asym:
                    break  # kink at the point itself; no step size helps
                if eps_floor / step > 2.5e-5 * max(abs(fd), abs(fd_half), 1e-8):
                    continue  # quotient noise floor too close to the target
                if abs(fd - fd_half) <= 2e-5 * max(abs(fd), abs(fd_half), 1e-8):
                    # Richardson extrapolation cancels the O(step^2) term.
                    estimate = (4 * fd_half - fd) / 3
                    break
            if estimate is None:
                continue  # kink-, roundoff-, or truncation-dominated
            an = float(grad[i])
            rel = abs(estimate - an) / max(abs(estimate), abs(an), 1e-8)
            worst = max(worst, rel)
            taken += 1
        report[name] = worst
    return report
