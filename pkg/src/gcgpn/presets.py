"""Named model variants: each preset is data (an operator set plus transform form).

The semantic operator of side-information variants defaults to class-attribute
cosine similarity; pass semantic_kind/semantic_source to back it with a
taxonomy file or a precomputed similarity matrix instead.
"""

from __future__ import annotations

from .model import ModelConfig
from .operators import BLOCKS, OperatorSpec

VARIANT_NAMES = (
    "pn_plus",
    "dfsl_avg",
    "dfsl_att",
    "gcgpn",
    "gcgpn-aux",
    "gcgpn-split",
    "gcgpn-aux-split",
    "gcgpn-cos",
    "gcgpn-l2",
    "gcgpn-cos-aux",
    "gcgpn-l2-aux",
    "gcgpn-aux-sn",
    "gcgpn-aux-fctheta",
)

_ALIASES = {"gcgpn-aux-fcθ": "gcgpn-aux-fctheta"}

_AUX = (OperatorSpec("aux_seen_self"), OperatorSpec("aux_novel_self"))


def _semantic(kind, source, blocks=None):
    return OperatorSpec(kind, normalize=True, blocks=blocks, source=source)


def _semantic_split(kind, source):
    return tuple(_semantic(kind, source, blocks=(b,)) for b in BLOCKS)


def variant_config(
    name: str,
    d_in: int,
    d: int,
    *,
    extractor: str = "mlp",
    hidden: tuple = (32,),
    layers: int = 1,
    rho: str = "identity",
    tau_init: float = 1.0,
    semantic_kind: str = "attribute_cosine",
    semantic_source: str | None = None,
    key_dim: int | None = None,
) -> ModelConfig:
    """Build the ModelConfig for a named variant."""
    name = _ALIASES.get(name, name)
    if name not in VARIANT_NAMES:
        raise ValueError(f"unknown variant {name!r} (choose from {', '.join(VARIANT_NAMES)})")

    common = dict(d_in=d_in, d=d, extractor=extractor, hidden=hidden,
                  layers=layers, rho=rho, tau_init=tau_init, key_dim=key_dim)
    sem = (semantic_kind, semantic_source)

    if name == "pn_plus":
        return ModelConfig(special_case="pn_plus", **common)
    if name == "dfsl_avg":
        return ModelConfig(special_case="dfsl_avg", **common)
    if name == "dfsl_att":
        specs = _AUX + (OperatorSpec("key_attention"),)
        return ModelConfig(operator_specs=specs, **common)

    theta_form = "diagonal"
    if name == "gcgpn":
        specs = (_semantic(*sem),)
    elif name == "gcgpn-aux":
        specs = (_semantic(*sem),) + _AUX
    elif name == "gcgpn-split":
        specs = _semantic_split(*sem)
    elif name == "gcgpn-aux-split":
        specs = _semantic_split(*sem) + _AUX
    elif name == "gcgpn-cos":
        specs = (OperatorSpec("proto_cosine", normalize=True),)
    elif name == "gcgpn-l2":
        specs = (OperatorSpec("proto_l2", normalize=True),)
    elif name == "gcgpn-cos-aux":
        specs = (OperatorSpec("proto_cosine", normalize=True),) + _AUX
    elif name == "gcgpn-l2-aux":
        specs = (OperatorSpec("proto_l2", normalize=True),) + _AUX
    elif name == "gcgpn-aux-sn":
        specs = (_semantic(*sem, blocks=("sn",)),) + _AUX
    elif name == "gcgpn-aux-fctheta":
        specs = (_semantic(*sem),) + _AUX
        theta_form = "full"
    else:  # pragma: no cover
        raise AssertionError(name)

    return ModelConfig(operator_specs=specs, theta_form=theta_form, **common)
