# config.py
"""Configuration d'exécution : valeurs par défaut, fichier key=value, surcharges CLI.

Priorité : option de ligne de commande > fichier > défaut.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

from dotenv import dotenv_values

from baselines import HestonBaselineConfig, LstmConfig
from data_pipeline import DataConfig
from informer_model import ModelConfig
from synthetic_market import HestonParams, ScenarioConfig
from training import SearchSpace, TrainConfig
from utils import ConfigError, sub_seed

logger = logging.getLogger(__name__)

# ==================== CONFIGURATION PAR DÉFAUT ====================
DEFAULT_CONFIG = {
    # général
    "seed": 7,
    "out_dir": "runs",
    "chain_path": "",
    "dataset_path": "",
    "log_level": "INFO",
    # scénario synthétique
    "days": 1200,
    "start_date": "2016-01-04",
    "s0": 100.0,
    "v0": 0.04,
    "kappa": 2.0,
    "theta": 0.04,
    "xi": 0.3,
    "rho": -0.7,
    "rate": 0.02,
    "expiry_spacing": 126,
    "contract_life": 252,
    "strike_multipliers": (0.6, 0.9, 1.1, 1.9),
    "strike_step": 0.5,
    "volume_mean": 200.0,
    "zero_volume_prob": 0.02,
    # filtres, fenêtres, découpage
    "min_ttm_days": 30,
    "moneyness_lo": 0.6,
    "moneyness_hi": 1.3,
    "min_volume": 1,
    "t_x": 30,
    "t_y": 30,
    "t_label": 5,
    "window_stride": 1,
    "train_fraction": 0.70,
    "val_fraction": 0.15,
    "test_fraction": 0.15,
    # modèle
    "d_model": 32,
    "n_heads": 3,
    "n_encoder_layers": 1,
    "n_decoder_layers": 2,
    "d_ff": 8,
    "dropout": 0.06,
    "attention_kind": "full",
    "factor": 3,
    "distilling": True,
    "distill_activation": "none",
    "anchor_residual": True,
    "lstm_hidden": 32,
    # entraînement
    "batch_size": 64,
    "max_epochs": 300,
    "lr": 1e-4,
    "patience": 30,
    "min_delta": 1e-8,
    "loss_weights": (),
    "lr_halving": False,
    "lr_halving_patience": 10,
    # dynamique de la référence Heston ; theta vide = v0 de chaque fenêtre
    "heston_kappa": 2.0,
    "heston_theta": None,
    "heston_xi": 0.3,
    "heston_rho": -0.7,
    # recherche aléatoire
    "search_trials": 10,
    "search_budget_epochs": 20,
    "search_n_encoder_layers": (1, 2),
    "search_n_decoder_layers": (1, 2),
    "search_n_heads": (1, 2, 3),
    "search_d_model": (16, 32),
    "search_lr": (1e-4, 1e-3),
    "search_dropout": (0.0, 0.1),
}

_INT_TUPLES = {"search_n_encoder_layers", "search_n_decoder_layers", "search_n_heads", "search_d_model"}
_OPTIONAL_FLOATS = {"heston_theta"}
_TRUE = {"1", "true", "yes", "oui", "on"}
_FALSE = {"0", "false", "no", "non", "off"}


def _coerce(key, raw):
    """Convertit une valeur texte vers le type de la valeur par défaut"""
    default = DEFAULT_CONFIG[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key in _OPTIONAL_FLOATS:
            return None if text == "" else float(text)
        if isinstance(default, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            cast = int if key in _INT_TUPLES else float
            return tuple(cast(part) for part in text.split(",") if part.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"valeur invalide pour '{key}' : {raw!r}") from exc


def load_config_file(path):
    """Lit un fichier key=value (commentaires #) et rejette les clés inconnues"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"fichier de configuration introuvable : {path}")
    try:
        values = dotenv_values(path)
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"lecture impossible de {path} : {exc}") from exc
    unknown = sorted(set(values) - set(DEFAULT_CONFIG))
    if unknown:
        raise ConfigError(f"clés inconnues dans {path} : {', '.join(unknown)} "
                          f"(clés valides : {', '.join(DEFAULT_CONFIG)})")
    return {key: _coerce(key, "" if value is None else value) for key, value in values.items()}


def merge_config(file_path=None, overrides=None):
    """Défauts, puis fichier, puis surcharges (les valeurs None sont ignorées)"""
    merged = dict(DEFAULT_CONFIG)
    if file_path:
        merged.update(load_config_file(file_path))
    for key, value in (overrides or {}).items():
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"clé de configuration inconnue : {key}")
        if value is not None:
            merged[key] = _coerce(key, value)
    return merged


# ==================== VUE TYPÉE ====================
@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def load(cls, file_path=None, overrides=None):
        config = cls(merge_config(file_path, overrides))
        config.validate()
        return config

    def __getitem__(self, key):
        return self.values[key]

    def validate(self):
        # la construction des sous-configurations vérifie leurs invariants
        self.model
        self.train.resolve_weights(self["t_y"])
        self.heston
        self.scenario
        self.data
        self.lstm
        if self["seed"] < 0:
            raise ConfigError(f"la graine doit être positive ou nulle (reçu {self['seed']})")

    @property
    def seed(self):
        return self["seed"]

    @property
    def out_dir(self):
        return Path(self["out_dir"])

    @property
    def chain_path(self):
        return Path(self["chain_path"]) if self["chain_path"] else self.out_dir / "chain.csv"

    @property
    def dataset_path(self):
        return Path(self["dataset_path"]) if self["dataset_path"] else self.out_dir / "dataset.npz"

    def checkpoint_path(self, model_kind):
        return self.out_dir / f"{model_kind}.npz"

    @property
    def rate(self):
        return self["rate"]

    @property
    def heston(self):
        return HestonParams(s0=self["s0"], v0=self["v0"], kappa=self["kappa"], theta=self["theta"],
                            xi=self["xi"], rho=self["rho"], r=self["rate"])

    @property
    def scenario(self):
        return ScenarioConfig(
            days=self["days"], start_date=self["start_date"], expiry_spacing=self["expiry_spacing"],
            contract_life=self["contract_life"], strike_multipliers=self["strike_multipliers"],
            strike_step=self["strike_step"], volume_mean=self["volume_mean"],
            zero_volume_prob=self["zero_volume_prob"],
        )

    @property
    def data(self):
        return DataConfig(
            min_ttm_days=self["min_ttm_days"], moneyness_lo=self["moneyness_lo"], moneyness_hi=self["moneyness_hi"],
            min_volume=self["min_volume"], t_x=self["t_x"], t_y=self["t_y"], t_label=self["t_label"],
            stride=self["window_stride"], train_fraction=self["train_fraction"],
            val_fraction=self["val_fraction"], test_fraction=self["test_fraction"],
        )

    @property
    def model(self):
        return ModelConfig(
            t_x=self["t_x"], t_y=self["t_y"], t_label=self["t_label"], d_model=self["d_model"],
            n_heads=self["n_heads"], n_encoder_layers=self["n_encoder_layers"],
            n_decoder_layers=self["n_decoder_layers"], d_ff=self["d_ff"], dropout=self["dropout"],
            attention_kind=self["attention_kind"], factor=self["factor"], distilling=self["distilling"],
            distill_activation=self["distill_activation"], anchor_residual=self["anchor_residual"],
            sampling_seed=sub_seed(self["seed"], "probsparse"),
        )

    @property
    def lstm(self):
        return LstmConfig(hidden_size=self["lstm_hidden"], t_y=self["t_y"])

    @property
    def train(self):
        return TrainConfig(
            batch_size=self["batch_size"], max_epochs=self["max_epochs"], lr=self["lr"], patience=self["patience"],
            seed=self["seed"], loss_weights=self["loss_weights"], min_delta=self["min_delta"],
            lr_halving=self["lr_halving"], lr_halving_patience=self["lr_halving_patience"],
        )

    @property
    def heston_baseline(self):
        return HestonBaselineConfig(kappa=self["heston_kappa"], theta=self["heston_theta"],
                                    xi=self["heston_xi"], rho=self["heston_rho"])

    @property
    def search_space(self):
        return SearchSpace(
            n_encoder_layers=self["search_n_encoder_layers"], n_decoder_layers=self["search_n_decoder_layers"],
            n_heads=self["search_n_heads"], d_model=self["search_d_model"], lr=self["search_lr"],
            dropout=self["search_dropout"],
        )
