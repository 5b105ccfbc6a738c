"""Operator plumbing: strict JSON config, JSONL data files, binary checkpoints.

All interchange is JSONL (one record per line, UTF-8, exact field sets);
checkpoints are the only binary format: magic "IU4R", a version integer, the
model kind, the config digest, then named row-major float32 arrays.
"""

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import marketplace, models, units as units_mod
from .marketplace import InteractionEvent, SynthItem, SynthUser, WorldConfig
from .models import ModelConfig
from .features import Sample
from .units import GsidCode, InterestUnit

log = logging.getLogger("iu4rec")

CHECKPOINT_MAGIC = b"IU4R"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Pipeline configuration
# ---------------------------------------------------------------------------

@dataclass
class UnitsConfig:
    image_k: int = 400
    semantic_level: int = 2
    min_members: int = 2
    precedence: tuple = ("SPU", "Image", "Semantic")
    seed: int = 101


@dataclass
class FeaturesConfig:
    train_days: int = 7


@dataclass
class EvalConfig:
    base_model: str = "DIN"


@dataclass
class SimulationConfig:
    model_a: str = "DIN"
    model_b: str = "IU_BOOSTED"
    split: float = 0.5
    shared_randomness: bool = False
    horizon_days: int = 1
    iu_slot_ratio: float = 0.13
    page_size: int = 20
    seed: int = 303


@dataclass
class PipelineConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    world_seed: int = 7
    log_seed: int = 17
    units: UnitsConfig = field(default_factory=UnitsConfig)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    model_kinds: tuple = ("DNN", "DIN", "IU_BOOSTED")
    eval: EvalConfig = field(default_factory=EvalConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)

    def override_seed(self, seed):
        """--seed N: re-derive every named seed from one master value."""
        self.world_seed = seed
        self.log_seed = seed + 1
        self.units.seed = seed + 2
        self.model.seed = seed + 3
        self.simulation.seed = seed + 4

    def digest(self):
        return hashlib.sha256(
            json.dumps(config_to_dict(self), sort_keys=True).encode()).hexdigest()[:16]


def config_to_dict(cfg):
    if dataclasses.is_dataclass(cfg):
        return {f.name: config_to_dict(getattr(cfg, f.name)) for f in fields(cfg)}
    if isinstance(cfg, tuple):
        return list(cfg)
    return cfg


def _find_key_line(text, key):
    for lineno, line in enumerate(text.splitlines(), start=1):
        if f'"{key}"' in line:
            return lineno
    return None


def _build_dataclass(cls, data, text, path=""):
    allowed = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in allowed:
            line = _find_key_line(text, key)
            where = f"line {line}" if line else "unknown line"
            raise ConfigError(f"unknown config key '{path}{key}' ({where})")
        f = allowed[key]
        if dataclasses.is_dataclass(f.type) or dataclasses.is_dataclass(
                getattr(f, "default_factory", None)):
            sub_cls = f.type if dataclasses.is_dataclass(f.type) else f.default_factory
            if not isinstance(value, dict):
                line = _find_key_line(text, key)
                raise ConfigError(
                    f"config key '{path}{key}' must be an object (line {line})")
            kwargs[key] = _build_dataclass(sub_cls, value, text, path=f"{path}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path):
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config parse error at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return _build_dataclass(PipelineConfig, data, text)


# ---------------------------------------------------------------------------
# JSONL files with exact field sets
# ---------------------------------------------------------------------------

SCHEMAS = {
    "users": ["user_id", "latent", "activity_rate"],
    "catalog": ["item_id", "seller_id", "true_unit", "category", "brand",
                "model", "image_vec", "text_vec", "unit_latent", "residual",
                "stock", "list_time", "sold", "sold_time"],
    "events": ["timestamp", "user_id", "item_id", "event_kind", "surface"],
    "units": ["iu_id", "iu_type", "title", "member_item_ids", "gsid"],
    "features": ["user_id", "item_id", "timestamp", "label", "domain",
                 "tgt_iu_idx", "stats_imp_bucket", "stats_clk_bucket",
                 "stats_ctr_bucket", "cross_click_bucket",
                 "cross_recency_bucket", "item_seq", "hier_iu_seq",
                 "tgt_inner_items"],
    "iu_stats": ["iu_id", "impressions", "clicks", "inquiries", "transactions"],
    "scored_samples": ["user_id", "score", "label", "domain"],
}


def write_jsonl(path, records, schema):
    expected = SCHEMAS[schema]
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            if list(r.keys()) != expected:
                raise DataError(f"{schema} record fields {list(r)} != {expected}")
            f.write(json.dumps(r, sort_keys=False) + "\n")


def read_jsonl(path, schema):
    expected = set(SCHEMAS[schema])
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            r = json.loads(line)
            got = set(r.keys())
            if got != expected:
                extra = got - expected
                missing = expected - got
                raise DataError(
                    f"{path}:{lineno}: bad {schema} record"
                    + (f", extra fields {sorted(extra)}" if extra else "")
                    + (f", missing fields {sorted(missing)}" if missing else ""))
            out.append(r)
    return out


def _vec(v):
    return [float(x) for x in v]


def user_to_record(u: SynthUser):
    return {"user_id": u.user_id, "latent": _vec(u.latent),
            "activity_rate": u.activity_rate}


def user_from_record(r):
    return SynthUser(r["user_id"], np.array(r["latent"]), r["activity_rate"])


def item_to_record(it: SynthItem):
    return {"item_id": it.item_id, "seller_id": it.seller_id,
            "true_unit": it.true_unit, "category": it.category,
            "brand": it.brand, "model": it.model,
            "image_vec": _vec(it.image_vec), "text_vec": _vec(it.text_vec),
            "unit_latent": _vec(it.unit_latent), "residual": _vec(it.residual),
            "stock": it.stock, "list_time": it.list_time, "sold": it.sold,
            "sold_time": it.sold_time}


def item_from_record(r):
    return SynthItem(r["item_id"], r["seller_id"], r["true_unit"], r["category"],
                     r["brand"], r["model"], np.array(r["image_vec"]),
                     np.array(r["text_vec"]), np.array(r["unit_latent"]),
                     np.array(r["residual"]), r["stock"], r["list_time"],
                     r["sold"], r["sold_time"])


def event_to_record(e: InteractionEvent):
    return {"timestamp": e.timestamp, "user_id": e.user_id, "item_id": e.item_id,
            "event_kind": e.event_kind, "surface": e.surface}


def event_from_record(r):
    return InteractionEvent(r["timestamp"], r["user_id"], r["item_id"],
                            r["event_kind"], r["surface"])


def unit_to_record(u: InterestUnit):
    return {"iu_id": u.iu_id, "iu_type": u.iu_type, "title": u.title,
            "member_item_ids": list(u.member_item_ids),
            "gsid": list(u.gsid) if u.gsid is not None else None}


def unit_from_record(r):
    return InterestUnit(r["iu_id"], r["iu_type"], r["member_item_ids"],
                        r["title"], gsid=tuple(r["gsid"]) if r["gsid"] else None)


def sample_to_record(s: Sample):
    return {"user_id": s.user_id, "item_id": s.item_id, "timestamp": s.timestamp,
            "label": s.label, "domain": s.domain, "tgt_iu_idx": s.tgt_iu_idx,
            "stats_imp_bucket": s.stats_imp_bucket,
            "stats_clk_bucket": s.stats_clk_bucket,
            "stats_ctr_bucket": s.stats_ctr_bucket,
            "cross_click_bucket": s.cross_click_bucket,
            "cross_recency_bucket": s.cross_recency_bucket,
            "item_seq": list(s.item_seq),
            "hier_iu_seq": [[iu, list(items)] for iu, items in s.hier_iu_seq],
            "tgt_inner_items": list(s.tgt_inner_items)}


def sample_from_record(r):
    return Sample(r["user_id"], r["item_id"], r["timestamp"], r["label"],
                  r["domain"], r["tgt_iu_idx"], r["stats_imp_bucket"],
                  r["stats_clk_bucket"], r["stats_ctr_bucket"],
                  r["cross_click_bucket"], r["cross_recency_bucket"],
                  r["item_seq"], [(iu, items) for iu, items in r["hier_iu_seq"]],
                  r["tgt_inner_items"])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: models.ModelParams, config_digest=""):
    """Named arrays as row-major little-endian float32 after a fixed header."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for s in (params.kind, config_digest):
            b = s.encode()
            f.write(struct.pack("<I", len(b)))
            f.write(b)
        flat = params.flat()
        f.write(struct.pack("<I", len(flat)))
        for name in sorted(flat):
            arr = flat[name]
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, expected_digest=None):
    """Returns (kind, {name: float64 array}, digest). Warns on digest mismatch."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not an IU4R checkpoint")
        version = struct.unpack("<I", f.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")

        def read_str():
            n = struct.unpack("<I", f.read(4))[0]
            return f.read(n).decode()

        kind = read_str()
        digest = read_str()
        if expected_digest and digest and digest != expected_digest:
            log.warning("checkpoint %s was built from config digest %s, "
                        "current config is %s", path, digest, expected_digest)
        arrays = {}
        n_arrays = struct.unpack("<I", f.read(4))[0]
        for _ in range(n_arrays):
            name = read_str()
            ndim = struct.unpack("<I", f.read(4))[0]
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape))
            arrays[name] = np.frombuffer(
                f.read(4 * count), dtype="<f4").astype(np.float64).reshape(shape)
    return kind, arrays, digest


def restore_params(kind, arrays, vocab_sizes, cfg: ModelConfig):
    """Rebuild ModelParams and overwrite every array from a checkpoint."""
    params = models.init_params(kind, vocab_sizes, cfg)
    flat = params.flat()
    if set(flat) != set(arrays):
        raise DataError(f"checkpoint arrays {sorted(arrays)} != model arrays "
                        f"{sorted(flat)}; config/model mismatch")
    for name, arr in arrays.items():
        if flat[name].shape != arr.shape:
            raise DataError(f"checkpoint array {name} has shape {arr.shape}, "
                            f"model expects {flat[name].shape}")
        flat[name][...] = arr
    return params
