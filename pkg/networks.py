"""
CoRLD networks built from gradcore primitives.

CorldNet maps an image to a stationary velocity field (encoder + decoder) and
to a unit-norm contrastive embedding (projection head). BoostedClassifier
classifies from image-intensity features, learned shape features, or both.
"""

from collections import OrderedDict
from typing import Dict, Optional, Tuple

import numpy as np

import gradcore as gc
from gradcore import Tensor
from logger import logger
from models import ArchSpec, ClassifierSpec
from storage import load_checkpoint, save_checkpoint
from validators import IntegrityError, ShapeError, ValidationError


def _he(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain * np.sqrt(2.0 / fan_in))


def corld_param_shapes(arch: ArchSpec) -> "OrderedDict[str, Tuple[int, ...]]":
    """Named parameter shapes of a CorldNet; a pure function of the descriptor"""
    k, ku = arch.kernel_size, arch.upsample_kernel
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    cin = arch.in_channels
    for i, cout in enumerate(arch.encoder_channels):
        shapes[f"encoder.{i}.conv.weight"] = (cout, cin, k, k)
        shapes[f"encoder.{i}.conv.bias"] = (cout,)
        shapes[f"encoder.{i}.norm.weight"] = (cout,)
        shapes[f"encoder.{i}.norm.bias"] = (cout,)
        cin = cout
    latent = cin
    for i, cout in enumerate(arch.decoder_channels):
        shapes[f"decoder.{i}.up.weight"] = (cin, cout, ku, ku)
        shapes[f"decoder.{i}.up.bias"] = (cout,)
        shapes[f"decoder.{i}.norm.weight"] = (cout,)
        shapes[f"decoder.{i}.norm.bias"] = (cout,)
        cin = cout
    shapes["decoder.head.weight"] = (2, cin, k, k)
    shapes["decoder.head.bias"] = (2,)
    shapes["projection.conv.weight"] = (arch.projection_dim, latent, 1, 1)
    shapes["projection.conv.bias"] = (arch.projection_dim,)
    shapes["projection.norm.weight"] = (arch.projection_dim,)
    shapes["projection.norm.bias"] = (arch.projection_dim,)
    return shapes


def parameter_count(arch: ArchSpec) -> int:
    return int(sum(np.prod(shape) for shape in corld_param_shapes(arch).values()))


def _init_params(shapes: Dict[str, Tuple[int, ...]], rng: np.random.Generator,
                 final_gain: float = 1.0, final_name: Optional[str] = None) -> "OrderedDict[str, Tensor]":
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in shapes.items():
        if name.endswith("norm.weight"):
            data = np.ones(shape)
        elif name.endswith("bias"):
            data = np.zeros(shape)
        elif ".up." in name:
            # each output pixel of a stride-2 transposed conv sees (k/2)^2 taps per input channel
            data = _he(rng, shape, shape[0] * (shape[2] // 2) * (shape[3] // 2))
        elif len(shape) == 4:
            gain = final_gain if name == final_name else 1.0
            data = _he(rng, shape, shape[1] * shape[2] * shape[3], gain)
        else:
            data = _he(rng, shape, shape[0])
        params[name] = gc.parameter(data)
    return params


class _ParamModule:
    params: "OrderedDict[str, Tensor]"

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise IntegrityError(f"parameter names differ: {sorted(missing)}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise IntegrityError(f"{name}: stored {state[name].shape} vs expected {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class CorldNet(_ParamModule):
    """Shape encoder, velocity decoder and projection head"""

    def __init__(self, arch: Optional[ArchSpec] = None, seed: int = 0):
        self.arch = arch or ArchSpec()
        rng = np.random.default_rng(seed)
        self.params = _init_params(
            corld_param_shapes(self.arch), rng,
            final_gain=self.arch.final_gain, final_name="decoder.head.weight",
        )

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def _conv_block(x: Tensor, p: Dict[str, Tensor], prefix: str, groups: int, slope: float) -> Tensor:
    """periodic conv 3x3 -> group_norm -> leaky_relu -> avg_pool 2x2"""
    k = p[f"{prefix}.conv.weight"].shape[-1]
    x = gc.conv2d(x, p[f"{prefix}.conv.weight"], p[f"{prefix}.conv.bias"], padding=k // 2, pad_mode="periodic")
    x = gc.group_norm(x, groups, p[f"{prefix}.norm.weight"], p[f"{prefix}.norm.bias"])
    return gc.avg_pool2d(gc.leaky_relu(x, slope), 2)


def encode(net: CorldNet, x: Tensor) -> Tensor:
    arch = net.arch
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ShapeError(f"encoder expects [B,{arch.in_channels},H,W], got {x.shape}")
    if x.shape[2] % arch.downsample or x.shape[3] % arch.downsample:
        raise ShapeError(f"input size {x.shape[2]}x{x.shape[3]} not divisible by {arch.downsample}")
    for i in range(len(arch.encoder_channels)):
        x = _conv_block(x, net.params, f"encoder.{i}", arch.groups, arch.leaky_slope)
    return x


def decode(net: CorldNet, latent: Tensor) -> Tensor:
    arch, p = net.arch, net.params
    x = latent
    for i in range(len(arch.decoder_channels)):
        x = gc.transposed_conv2d(x, p[f"decoder.{i}.up.weight"], p[f"decoder.{i}.up.bias"],
                                 stride=2, padding=(arch.upsample_kernel - 2) // 2)
        x = gc.group_norm(x, arch.groups, p[f"decoder.{i}.norm.weight"], p[f"decoder.{i}.norm.bias"])
        x = gc.leaky_relu(x, arch.leaky_slope)
    raw = gc.conv2d(x, p["decoder.head.weight"], p["decoder.head.bias"], padding=arch.kernel_size // 2,
                    pad_mode="periodic")
    bound = arch.velocity_bound
    return gc.scalar_mul(gc.tanh(gc.scalar_mul(raw, 1.0 / bound)), bound)


def project(net: CorldNet, latent: Tensor) -> Tensor:
    arch, p = net.arch, net.params
    x = gc.conv2d(latent, p["projection.conv.weight"], p["projection.conv.bias"])
    x = gc.group_norm(x, arch.groups, p["projection.norm.weight"], p["projection.norm.bias"])
    x = gc.flatten(gc.adaptive_avg_pool2d(x, 1))
    return gc.l2_normalize(x, axis=1)


def encoder_input(net: CorldNet, images: Tensor, templates: Optional[Tensor] = None) -> Tensor:
    """Images alone, or image (+) template channels for template-conditioned nets"""
    if net.arch.in_channels == images.shape[1]:
        return images
    if templates is None or images.shape[1] + templates.shape[1] != net.arch.in_channels:
        raise ShapeError(
            f"network takes {net.arch.in_channels} input channels; got images {images.shape}"
            + (f" and templates {templates.shape}" if templates is not None else " without templates")
        )
    return gc.concat([images, templates], axis=1)


def corld_forward(net: CorldNet, images: Tensor,
                  templates: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, Tensor]:
    """(velocities [B,2,H,W], latent [B,Cz,h,w], projected [B,D])"""
    latent = encode(net, encoder_input(net, images, templates))
    velocities = decode(net, latent)
    if velocities.shape[2:] != images.shape[2:]:
        raise ShapeError(f"decoder produced {velocities.shape} for input {images.shape}")
    return velocities, latent, project(net, latent)


def shape_feature_dim(arch: ArchSpec, size: int, source: str) -> int:
    if source == "projected":
        return arch.projection_dim
    side = size // arch.downsample
    return arch.encoder_channels[-1] * side * side


def shape_features(net: CorldNet, images: Tensor, source: str = "projected",
                   templates: Optional[Tensor] = None, trainable: bool = False) -> Tensor:
    """Learned shape features fed to the classifier; frozen unless trainable"""
    if source not in ("projected", "latent"):
        raise ValidationError(f"unknown fuse_source {source!r}")
    if trainable:
        _, latent, projected = corld_forward(net, images, templates)
    else:
        with gc.no_tape():
            _, latent, projected = corld_forward(net, images, templates)
        latent, projected = latent.detach(), projected.detach()
    return projected if source == "projected" else gc.flatten(latent)


def classifier_param_shapes(spec: ClassifierSpec) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    if spec.use_image:
        cin = spec.in_channels
        for i, cout in enumerate(spec.image_channels):
            shapes[f"image.{i}.conv.weight"] = (cout, cin, 3, 3)
            shapes[f"image.{i}.conv.bias"] = (cout,)
            shapes[f"image.{i}.norm.weight"] = (cout,)
            shapes[f"image.{i}.norm.bias"] = (cout,)
            cin = cout
    h1, h2 = spec.hidden
    if spec.use_image:
        shapes["head.fc1.image"] = (spec.image_dim, h1)
    if spec.use_shape:
        shapes["head.fc1.shape"] = (spec.shape_dim, h1)
    shapes["head.fc1.bias"] = (h1,)
    shapes["head.fc2.weight"] = (h1, h2)
    shapes["head.fc2.bias"] = (h2,)
    shapes["head.fc3.weight"] = (h2, spec.num_classes)
    shapes["head.fc3.bias"] = (spec.num_classes,)
    return shapes


class BoostedClassifier(_ParamModule):
    """Image encoder plus a three-layer fully connected head over fused features"""

    def __init__(self, spec: ClassifierSpec, seed: int = 0):
        self.spec = spec
        self.params = _init_params(classifier_param_shapes(spec), np.random.default_rng(seed))
        if spec.use_image and spec.use_shape:
            # both fc1 blocks feed one pre-activation; scale by the joint fan-in
            fan_in = spec.image_dim + spec.shape_dim
            rng = np.random.default_rng(seed + 1)
            for name, dim in (("head.fc1.image", spec.image_dim), ("head.fc1.shape", spec.shape_dim)):
                self.params[name] = gc.parameter(_he(rng, (dim, spec.hidden[0]), fan_in))
        self.rng = np.random.default_rng(seed)

    @property
    def arm(self) -> str:
        if self.spec.use_image and self.spec.use_shape:
            return "fused"
        return "image_only" if self.spec.use_image else "shape_only"


def image_features(clf: BoostedClassifier, images: Tensor) -> Tensor:
    spec = clf.spec
    if images.ndim != 4 or images.shape[1] != spec.in_channels:
        raise ShapeError(f"image encoder expects [B,{spec.in_channels},H,W], got {images.shape}")
    x = images
    for i in range(len(spec.image_channels)):
        x = _conv_block(x, clf.params, f"image.{i}", spec.groups, spec.leaky_slope)
    return gc.flatten(gc.adaptive_avg_pool2d(x, 1))


def classifier_head(clf: BoostedClassifier, image_feats: Optional[Tensor], shape_feats: Optional[Tensor],
                    training: bool = False) -> Tensor:
    spec, p = clf.spec, clf.params
    h = None
    if spec.use_image:
        h = gc.matmul(image_feats, p["head.fc1.image"])
    if spec.use_shape:
        s = gc.matmul(shape_feats, p["head.fc1.shape"])
        h = s if h is None else gc.add(h, s)
    h = gc.leaky_relu(gc.add_bias(h, p["head.fc1.bias"]), spec.leaky_slope)
    if training:
        h = gc.dropout(h, spec.dropout, clf.rng)
    h = gc.leaky_relu(gc.add_bias(gc.matmul(h, p["head.fc2.weight"]), p["head.fc2.bias"]), spec.leaky_slope)
    if training:
        h = gc.dropout(h, spec.dropout, clf.rng)
    return gc.add_bias(gc.matmul(h, p["head.fc3.weight"]), p["head.fc3.bias"])


def boosted_forward(clf: BoostedClassifier, net: Optional[CorldNet], images: Tensor,
                    training: bool = False, shape_feats: Optional[Tensor] = None,
                    zero_shape: bool = False, finetune: bool = False,
                    templates: Optional[Tensor] = None) -> Tensor:
    """logits = head(concat(image_features(I), shape_features(I)))

    `shape_feats` short-circuits the frozen CoRLD forward when features were
    precomputed; `zero_shape` replaces them with zeros.
    """
    spec = clf.spec
    img = image_features(clf, images) if spec.use_image else None
    shp = None
    if spec.use_shape:
        if shape_feats is None:
            if net is None:
                raise ValidationError("shape features requested without a CoRLD network")
            shape_feats = shape_features(net, images, spec.fuse_source, templates, trainable=finetune)
        if shape_feats.ndim != 2 or shape_feats.shape[1] != spec.shape_dim:
            raise ShapeError(f"fusion descriptor expects shape_dim={spec.shape_dim}, got {shape_feats.shape}")
        if shape_feats.shape[0] != images.shape[0]:
            raise ShapeError(f"{shape_feats.shape[0]} shape features for {images.shape[0]} images")
        shp = Tensor(np.zeros(shape_feats.shape, dtype=shape_feats.dtype)) if zero_shape else shape_feats
    return classifier_head(clf, img, shp, training)


def save_corld(net: CorldNet, path) -> None:
    save_checkpoint(path, net.state_dict(), {"kind": "corld", "arch": net.arch.model_dump()})
    logger.info(f"Saved CoRLD checkpoint to {path}")


def load_corld(path) -> CorldNet:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "corld":
        raise IntegrityError(f"{path}: not a CoRLD checkpoint (kind={header.get('kind')!r})")
    net = CorldNet(ArchSpec.model_validate(header["arch"]))
    net.load_state_dict(tensors)
    return net


def save_classifier(clf: BoostedClassifier, path) -> None:
    save_checkpoint(path, clf.state_dict(), {"kind": "classifier", "spec": clf.spec.model_dump()})
    logger.info(f"Saved {clf.arm} classifier checkpoint to {path}")


def load_classifier(path) -> BoostedClassifier:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "classifier":
        raise IntegrityError(f"{path}: not a classifier checkpoint (kind={header.get('kind')!r})")
    clf = BoostedClassifier(ClassifierSpec.model_validate(header["spec"]))
    clf.load_state_dict(tensors)
    return clf
