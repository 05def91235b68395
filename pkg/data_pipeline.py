# data_pipeline.py
"""Chaîne de préparation : lecture CSV, filtres d'éligibilité, fenêtres glissantes,
découpage chronologique et normalisation min-max."""
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from utils import ChainFormatError, NormalizationError, SplitError

logger = logging.getLogger(__name__)

# ==================== CONFIGURATION ====================
CHAIN_COLUMNS = (
    "quote_date", "expiry_date", "strike", "option_type",
    "underlying_price", "implied_vol", "mid_price", "volume",
)
FEATURE_NAMES = ("underlying_price", "implied_vol", "ttm_years", "strike", "type_indicator", "mid_price")
TARGET_INDEX = FEATURE_NAMES.index("mid_price")
MAX_MALFORMED_FRACTION = 0.10
DAYS_PER_YEAR = 365.0
DATASET_FORMAT_VERSION = 1
MAX_SPLIT_PASSES = 20


@dataclass(frozen=True)
class DataConfig:
    min_ttm_days: int = 30
    moneyness_lo: float = 0.6
    moneyness_hi: float = 1.3
    min_volume: int = 1
    t_x: int = 30
    t_y: int = 30
    t_label: int = 5
    stride: int = 1
    train_fraction: float = 0.70
    val_fraction: float = 0.15
    test_fraction: float = 0.15

    @property
    def min_observations(self):
        return self.t_x + self.t_y


# ==================== TYPES ====================
@dataclass(frozen=True)
class OptionRecord:
    """Une cotation journalière d'un contrat"""
    quote_date: date
    expiry_date: date
    strike: float
    option_type: str
    underlying_price: float
    implied_vol: float
    mid_price: float
    volume: int

    @property
    def contract_id(self):
        return f"{self.option_type}-{self.expiry_date.isoformat()}-{self.strike!r}"

    @property
    def ttm_days(self):
        return (self.expiry_date - self.quote_date).days

    @property
    def moneyness(self):
        return self.underlying_price / self.strike

    def features(self):
        return (
            self.underlying_price,
            self.implied_vol,
            self.ttm_days / DAYS_PER_YEAR,
            self.strike,
            1.0 if self.option_type == "call" else 0.0,
            self.mid_price,
        )


@dataclass(frozen=True)
class RowIssue:
    line: int
    reason: str


@dataclass(frozen=True)
class NormalizationParams:
    x_min: tuple
    x_max: tuple
    feature_names: tuple = FEATURE_NAMES

    def to_dict(self):
        return {"feature_names": list(self.feature_names), "x_min": list(self.x_min), "x_max": list(self.x_max)}

    @classmethod
    def from_dict(cls, payload):
        return cls(
            x_min=tuple(float(v) for v in payload["x_min"]),
            x_max=tuple(float(v) for v in payload["x_max"]),
            feature_names=tuple(payload["feature_names"]),
        )


@dataclass(eq=False)
class WindowSample:
    contract_id: str
    encoder_raw: np.ndarray          # (T_x, F) caractéristiques brutes
    decoder_known_raw: np.ndarray    # (T_label,) derniers prix observés
    target_raw: np.ndarray           # (T_y,) prix futurs
    anchor_price: float              # y_t
    encoder_start_date: date
    window_end_date: date
    target_dates: tuple
    encoder_input: np.ndarray = None
    decoder_known: np.ndarray = None
    target: np.ndarray = None

    @property
    def target_start_date(self):
        return self.target_dates[0]

    @property
    def is_normalized(self):
        return self.encoder_input is not None


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list

    def counts(self):
        return {"train": len(self.train), "validation": len(self.validation), "test": len(self.test)}


@dataclass
class WindowBatch:
    encoder_input: np.ndarray   # (B, T_x, F)
    decoder_known: np.ndarray   # (B, T_label)
    target: np.ndarray          # (B, T_y)

    def __len__(self):
        return self.encoder_input.shape[0]


@dataclass
class PreparedDataset:
    split: DatasetSplit
    normalizer: NormalizationParams
    data_config: DataConfig
    tally: dict = field(default_factory=dict)


# ==================== LECTURE ====================
def parse_chain_with_issues(csv_path):
    """Lit une chaîne d'options ; renvoie (enregistrements, lignes rejetées)"""
    path = Path(csv_path)
    if not path.exists():
        raise ChainFormatError(f"fichier de chaîne introuvable : {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        logger.warning("fichier de chaîne vide : %s", path)
        return [], []

    if tuple(frame.columns) != CHAIN_COLUMNS:
        raise ChainFormatError(
            f"en-tête inattendu dans {path} : {','.join(frame.columns)} "
            f"(attendu {','.join(CHAIN_COLUMNS)})"
        )
    if frame.empty:
        logger.warning("fichier de chaîne sans ligne de données : %s", path)
        return [], []

    quote = pd.to_datetime(frame["quote_date"], format="%Y-%m-%d", errors="coerce")
    expiry = pd.to_datetime(frame["expiry_date"], format="%Y-%m-%d", errors="coerce")
    numbers = {
        column: pd.to_numeric(frame[column], errors="coerce")
        for column in ("strike", "underlying_price", "implied_vol", "mid_price", "volume")
    }
    finite = np.logical_and.reduce([np.isfinite(values.to_numpy(dtype=float)) for values in numbers.values()])
    volume = numbers["volume"]

    checks = [
        (quote.isna() | expiry.isna(), "date invalide (format AAAA-MM-JJ attendu)"),
        (~finite, "valeur numérique invalide"),
        (~frame["option_type"].isin(["call", "put"]), "type d'option inconnu (call|put)"),
        (expiry <= quote, "échéance antérieure ou égale à la date de cotation"),
        (numbers["strike"] <= 0, "strike non positif"),
        (numbers["underlying_price"] <= 0, "prix du sous-jacent non positif"),
        (numbers["implied_vol"] <= 0, "volatilité implicite non positive"),
        (numbers["mid_price"] < 0, "prix milieu négatif"),
        ((volume < 0) | (volume % 1 != 0), "volume non entier ou négatif"),
    ]
    reasons = pd.Series("", index=frame.index)
    for bad, reason in checks:
        bad = pd.Series(np.asarray(bad, dtype=bool), index=frame.index)
        reasons = reasons.mask((reasons == "") & bad, reason)

    # ligne 1 = en-tête
    issues = [RowIssue(line=int(i) + 2, reason=r) for i, r in reasons.items() if r]
    if len(issues) > MAX_MALFORMED_FRACTION * len(frame):
        raise ChainFormatError(
            f"{len(issues)} lignes invalides sur {len(frame)} dans {path} "
            f"(première : ligne {issues[0].line}, {issues[0].reason})"
        )
    for issue in issues:
        logger.warning("ligne %d rejetée : %s", issue.line, issue.reason)

    valid = reasons == ""
    records = [
        OptionRecord(
            quote_date=q.date(),
            expiry_date=e.date(),
            strike=float(k),
            option_type=t,
            underlying_price=float(s),
            implied_vol=float(iv),
            mid_price=float(m),
            volume=int(v),
        )
        for q, e, k, t, s, iv, m, v in zip(
            quote[valid], expiry[valid], numbers["strike"][valid], frame["option_type"][valid],
            numbers["underlying_price"][valid], numbers["implied_vol"][valid],
            numbers["mid_price"][valid], volume[valid],
        )
    ]
    return records, issues


def parse_chain(csv_path):
    records, _ = parse_chain_with_issues(csv_path)
    return records


# ==================== FILTRES ====================
def filter_with_tally(records, min_ttm_days=30, moneyness_lo=0.6, moneyness_hi=1.3,
                      min_volume=1, min_observations=60):
    """Filtre d'éligibilité avec le décompte des rejets par motif"""
    tally = Counter()
    survivors = []
    for record in records:
        if record.ttm_days < min_ttm_days:
            tally["ttm"] += 1
        elif not moneyness_lo <= record.moneyness <= moneyness_hi:
            tally["moneyness"] += 1
        elif record.volume < min_volume:
            tally["volume"] += 1
        else:
            survivors.append(record)

    rows_per_contract = Counter(record.contract_id for record in survivors)
    kept = []
    for record in survivors:
        if rows_per_contract[record.contract_id] < min_observations:
            tally["observations"] += 1
        else:
            kept.append(record)
    return kept, dict(tally)


def filter_eligible(records, min_ttm_days=30, moneyness_lo=0.6, moneyness_hi=1.3,
                    min_volume=1, min_observations=60):
    kept, _ = filter_with_tally(records, min_ttm_days, moneyness_lo, moneyness_hi, min_volume, min_observations)
    return kept


def group_by_contract(records):
    """Séries par contrat, triées par date de cotation, dans l'ordre des identifiants"""
    series = {}
    for record in records:
        series.setdefault(record.contract_id, []).append(record)
    return {key: sorted(series[key], key=lambda r: r.quote_date) for key in sorted(series)}


# ==================== FENÊTRES ====================
def build_windows(contract_series, t_x, t_y, t_label, stride=1):
    """Fenêtres glissantes d'un contrat : encodeur [i, i+T_x), cible [i+T_x, i+T_x+T_y)"""
    if min(t_x, t_y, stride) < 1 or not 0 <= t_label <= t_x:
        raise ValueError(f"tailles de fenêtre invalides : T_x={t_x}, T_y={t_y}, T_label={t_label}, stride={stride}")
    length = len(contract_series)
    if length < t_x + t_y:
        return []

    features = np.array([record.features() for record in contract_series], dtype=np.float64)
    mids = features[:, TARGET_INDEX]
    dates = [record.quote_date for record in contract_series]
    contract_id = contract_series[0].contract_id

    samples = []
    for start in range(0, length - t_x - t_y + 1, stride):
        end = start + t_x
        samples.append(WindowSample(
            contract_id=contract_id,
            encoder_raw=features[start:end].copy(),
            decoder_known_raw=mids[end - t_label:end].copy(),
            target_raw=mids[end:end + t_y].copy(),
            anchor_price=float(mids[end - 1]),
            encoder_start_date=dates[start],
            window_end_date=dates[end - 1],
            target_dates=tuple(dates[end:end + t_y]),
        ))
    return samples


def build_all_windows(records, data_config):
    samples = []
    for series in group_by_contract(records).values():
        samples.extend(build_windows(series, data_config.t_x, data_config.t_y,
                                     data_config.t_label, data_config.stride))
    return samples


# ==================== DÉCOUPAGE ====================
def _snap_to_date_boundary(dates, cut):
    """Ramène une coupure sur la frontière de date la plus proche"""
    n = len(dates)
    if 0 < cut < n and dates[cut - 1] != dates[cut]:
        return cut
    lower = next((i for i in range(min(cut, n - 1), 0, -1) if dates[i - 1] != dates[i]), None)
    upper = next((i for i in range(max(cut, 1), n) if dates[i - 1] != dates[i]), None)
    if lower is None and upper is None:
        raise SplitError("toutes les fenêtres se terminent à la même date : découpage chronologique impossible")
    if lower is None:
        return upper
    if upper is None:
        return lower
    return lower if cut - lower <= upper - cut else upper


def _allocation(n, train_fraction, val_fraction):
    n_val = max(1, math.floor(val_fraction * n + 1e-9))
    n_train = min(math.floor(train_fraction * n + 0.5), n - n_val - 1)
    return n_train, n_val, n - n_train - n_val


def chrono_split(samples, train_fraction=0.70, val_fraction=0.15, test_fraction=0.15):
    """Découpage chronologique par date de fin de fenêtre, avec purge aux frontières.

    Comptes : train = arrondi(0.70 n), validation = max(1, plancher(0.15 n)),
    test = reste (au moins 1). Les coupures sont ramenées sur une frontière de
    date : une date n'appartient jamais à deux sous-ensembles.

    Purge : une fenêtre d'entraînement est écartée si l'une de ses dates cible
    dépasse la première date de fin de la validation ou atteint le début d'un
    encodeur du test ; une fenêtre de validation est écartée si sa cible dépasse
    la première date de fin du test. Les proportions s'appliquent aux fenêtres
    conservées (point fixe, au plus ``MAX_SPLIT_PASSES`` passes).
    """
    n = len(samples)
    if n < 3:
        raise SplitError(f"au moins 3 fenêtres nécessaires pour découper, {n} reçue(s)")
    if min(train_fraction, val_fraction, test_fraction) <= 0 or abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9:
        raise SplitError("les proportions train/validation/test doivent être positives et sommer à 1")

    ordered = sorted(samples, key=lambda s: (s.window_end_date, s.contract_id))
    dates = [s.window_end_date for s in ordered]
    if dates[0] == dates[-1]:
        raise SplitError("toutes les fenêtres se terminent à la même date : découpage chronologique impossible")

    kept_total = n
    for _ in range(MAX_SPLIT_PASSES):
        _, n_val, n_test = _allocation(kept_total, train_fraction, val_fraction)
        second_cut = _snap_to_date_boundary(dates, max(1, n - n_test))
        val_limit = dates[second_cut]

        first_cut, kept_val = second_cut, 0
        while first_cut > 0 and kept_val < n_val:
            first_cut -= 1
            kept_val += ordered[first_cut].target_dates[-1] <= val_limit
        first_cut = _snap_to_date_boundary(dates, max(first_cut, 1))
        if not 0 < first_cut < second_cut:
            raise SplitError(f"pas assez de dates distinctes pour un découpage chronologique ({n} fenêtres)")

        test = ordered[second_cut:]
        validation = [s for s in ordered[first_cut:second_cut] if s.target_dates[-1] <= val_limit]
        train_limit = dates[first_cut]
        test_encoder_start = min(s.encoder_start_date for s in test)
        train = [s for s in ordered[:first_cut]
                 if s.target_dates[-1] <= train_limit and s.target_dates[-1] < test_encoder_start]
        if len(train) + len(validation) + len(test) == kept_total:
            break
        kept_total = len(train) + len(validation) + len(test)

    if not train or not validation:
        raise SplitError(f"découpage impossible : sous-ensemble vide après purge des horizons ({n} fenêtres)")
    purged = n - len(train) - len(validation) - len(test)
    split = DatasetSplit(train, validation, test)
    logger.info("découpage chronologique : %s, %d fenêtres purgées aux frontières", split.counts(), purged)
    return split


# ==================== NORMALISATION ====================
def fit_normalizer(train_samples):
    """Min/max par caractéristique sur les fenêtres d'entraînement (cibles incluses dans mid_price)"""
    if not train_samples:
        raise NormalizationError("impossible d'ajuster la normalisation sans fenêtre d'entraînement")
    rows = np.concatenate([s.encoder_raw for s in train_samples], axis=0)
    targets = np.concatenate([s.target_raw for s in train_samples])
    x_min = rows.min(axis=0)
    x_max = rows.max(axis=0)
    x_min[TARGET_INDEX] = min(x_min[TARGET_INDEX], targets.min())
    x_max[TARGET_INDEX] = max(x_max[TARGET_INDEX], targets.max())
    for name, low, high in zip(FEATURE_NAMES, x_min, x_max):
        if high == low:
            logger.warning("caractéristique constante '%s' : normalisée à 0", name)
    return NormalizationParams(x_min=tuple(float(v) for v in x_min), x_max=tuple(float(v) for v in x_max))


def _bounds(params, column):
    if params is None:
        raise NormalizationError("normalisation non ajustée")
    x_min = np.asarray(params.x_min, dtype=np.float64)
    x_max = np.asarray(params.x_max, dtype=np.float64)
    if column is not None:
        return x_min[column], x_max[column]
    return x_min, x_max


def transform(values, params, column=None):
    """(x - min) / (max - min) ; colonne dégénérée -> 0 ; pas de rognage hors [0, 1]"""
    low, high = _bounds(params, column)
    values = np.asarray(values, dtype=np.float64)
    span = high - low
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (values - low) / safe, 0.0)


def inverse_transform(values, params, column=TARGET_INDEX):
    """Retour à l'échelle brute ; par défaut la colonne cible mid_price"""
    low, high = _bounds(params, column)
    return np.asarray(values, dtype=np.float64) * (high - low) + low


def normalize_samples(samples, params):
    return [
        replace(
            sample,
            encoder_input=transform(sample.encoder_raw, params),
            decoder_known=transform(sample.decoder_known_raw, params, TARGET_INDEX),
            target=transform(sample.target_raw, params, TARGET_INDEX),
        )
        for sample in samples
    ]


def stack_samples(samples):
    """Assemble un mini-lot à partir de fenêtres normalisées"""
    if not samples:
        raise ValueError("lot vide")
    if not all(sample.is_normalized for sample in samples):
        raise NormalizationError("les fenêtres doivent être normalisées avant l'assemblage d'un lot")
    return WindowBatch(
        encoder_input=np.stack([s.encoder_input for s in samples]),
        decoder_known=np.stack([s.decoder_known for s in samples]),
        target=np.stack([s.target for s in samples]),
    )


def prepare_dataset(records, data_config):
    """Filtres, fenêtres, découpage puis normalisation ajustée sur l'entraînement seul"""
    kept, tally = filter_with_tally(
        records, data_config.min_ttm_days, data_config.moneyness_lo, data_config.moneyness_hi,
        data_config.min_volume, data_config.min_observations,
    )
    if not kept:
        raise SplitError("aucun contrat éligible (zero eligible) : tous les enregistrements sont filtrés")
    samples = build_all_windows(kept, data_config)
    if not samples:
        raise SplitError("aucune fenêtre construite : séries trop courtes après filtrage")
    split = chrono_split(samples, data_config.train_fraction, data_config.val_fraction, data_config.test_fraction)
    normalizer = fit_normalizer(split.train)
    normalized = DatasetSplit(
        train=normalize_samples(split.train, normalizer),
        validation=normalize_samples(split.validation, normalizer),
        test=normalize_samples(split.test, normalizer),
    )
    return PreparedDataset(split=normalized, normalizer=normalizer, data_config=data_config, tally=tally)


# ==================== PERSISTANCE ====================
def _pack(samples, prefix):
    if not samples:
        return {}
    dates = lambda values: np.array([d.isoformat() for d in values])
    return {
        f"{prefix}/contract_id": np.array([s.contract_id for s in samples]),
        f"{prefix}/encoder_raw": np.stack([s.encoder_raw for s in samples]),
        f"{prefix}/decoder_known_raw": np.stack([s.decoder_known_raw for s in samples]),
        f"{prefix}/target_raw": np.stack([s.target_raw for s in samples]),
        f"{prefix}/anchor_price": np.array([s.anchor_price for s in samples]),
        f"{prefix}/encoder_start_date": dates(s.encoder_start_date for s in samples),
        f"{prefix}/window_end_date": dates(s.window_end_date for s in samples),
        f"{prefix}/target_dates": np.stack([dates(s.target_dates) for s in samples]),
    }


def _unpack(archive, prefix, count):
    if count == 0:
        return []
    as_dates = np.vectorize(date.fromisoformat, otypes=[object])
    target_dates = as_dates(archive[f"{prefix}/target_dates"])
    return [
        WindowSample(
            contract_id=str(contract_id),
            encoder_raw=encoder,
            decoder_known_raw=known,
            target_raw=target,
            anchor_price=float(anchor),
            encoder_start_date=date.fromisoformat(str(start)),
            window_end_date=date.fromisoformat(str(end)),
            target_dates=tuple(target_dates[i]),
        )
        for i, (contract_id, encoder, known, target, anchor, start, end) in enumerate(zip(
            archive[f"{prefix}/contract_id"], archive[f"{prefix}/encoder_raw"],
            archive[f"{prefix}/decoder_known_raw"], archive[f"{prefix}/target_raw"],
            archive[f"{prefix}/anchor_price"], archive[f"{prefix}/encoder_start_date"],
            archive[f"{prefix}/window_end_date"],
        ))
    ]


def save_dataset(path, prepared):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "data_config": asdict(prepared.data_config),
        "normalizer": prepared.normalizer.to_dict(),
        "counts": prepared.split.counts(),
        "tally": prepared.tally,
    }
    arrays = {"__meta__": np.array(json.dumps(meta))}
    for name in ("train", "validation", "test"):
        arrays.update(_pack(getattr(prepared.split, name), name))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info("jeu de données écrit : %s", path)
    return path


def load_dataset(path):
    path = Path(path)
    if not path.exists():
        raise SplitError(f"jeu de données introuvable : {path} (lancez d'abord la commande prepare)")
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format_version") != DATASET_FORMAT_VERSION:
            raise SplitError(f"version de jeu de données non supportée : {meta.get('format_version')}")
        normalizer = NormalizationParams.from_dict(meta["normalizer"])
        parts = {
            name: normalize_samples(_unpack(archive, name, meta["counts"][name]), normalizer)
            for name in ("train", "validation", "test")
        }
    config = DataConfig(**meta["data_config"])
    return PreparedDataset(split=DatasetSplit(**parts), normalizer=normalizer, data_config=config, tally=meta["tally"])
