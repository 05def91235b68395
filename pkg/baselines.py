# baselines.py
"""Modèles de référence : Black-Scholes, Heston, LSTM et persistance.

Protocole de prévision des pricers statiques (hypothèse explicite) : le
sous-jacent et la volatilité restent figés à leur dernière valeur observée,
seule la maturité décroît de h/365 à l'horizon h.
"""
import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erfc

import tensor_engine as te
from data_pipeline import FEATURE_NAMES
from synthetic_market import HestonParams
from utils import ConfigError, PricingError, make_rng, sub_seed

logger = logging.getLogger(__name__)

# ==================== CONSTANTES ====================
QUADRATURE_NODES = 128
INTEGRATION_LOWER = 1e-8
INTEGRATION_UPPER = 200.0
MAX_INTEGRATION_UPPER = 5000.0
# exp(-DECAY_EXPONENT) : décroissance visée de la fonction caractéristique à la borne
DECAY_EXPONENT = 25.0
DETERMINISTIC_XI = 1e-8

_SPOT = FEATURE_NAMES.index("underlying_price")
_VOL = FEATURE_NAMES.index("implied_vol")
_TTM = FEATURE_NAMES.index("ttm_years")
_STRIKE = FEATURE_NAMES.index("strike")
_TYPE = FEATURE_NAMES.index("type_indicator")


# ==================== BLACK-SCHOLES ====================
@dataclass(frozen=True)
class BsInputs:
    spot: float
    strike: float
    rate: float
    vol: float
    tau: float
    option_type: str = "call"


def norm_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def bs_price_array(spot, strike, rate, vol, tau, is_call):
    """Version vectorisée ; tau = 0 ou vol = 0 donne la valeur intrinsèque actualisée"""
    spot, strike, rate, vol, tau = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (spot, strike, rate, vol, tau)))
    is_call = np.broadcast_to(np.asarray(is_call, dtype=bool), spot.shape)
    if (spot <= 0).any() or (strike <= 0).any() or (vol < 0).any() or (tau < 0).any():
        raise PricingError("entrées Black-Scholes invalides : spot, strike > 0 et vol, tau >= 0 requis")

    discounted_strike = strike * np.exp(-rate * tau)
    intrinsic = np.where(is_call, np.maximum(spot - discounted_strike, 0.0), np.maximum(discounted_strike - spot, 0.0))
    total_vol = vol * np.sqrt(tau)
    live = total_vol > 0
    safe_vol = np.where(live, total_vol, 1.0)
    d1 = (np.log(spot / strike) + rate * tau + 0.5 * total_vol ** 2) / safe_vol
    d2 = d1 - safe_vol
    call = spot * norm_cdf(d1) - discounted_strike * norm_cdf(d2)
    put = discounted_strike * norm_cdf(-d2) - spot * norm_cdf(-d1)
    return np.where(live, np.where(is_call, call, put), intrinsic)


def bs_price(inputs):
    if inputs.option_type not in ("call", "put"):
        raise PricingError(f"type d'option inconnu : {inputs.option_type}")
    return float(bs_price_array(inputs.spot, inputs.strike, inputs.rate, inputs.vol, inputs.tau,
                                inputs.option_type == "call"))


# ==================== HESTON ====================
@lru_cache(maxsize=None)
def _legendre(n_nodes):
    return np.polynomial.legendre.leggauss(n_nodes)


def _integration_grid(params, tau):
    """Nœuds et poids de Gauss-Legendre ; borne élargie quand la maturité est courte"""
    kappa_tau = params.kappa * tau
    drift = (1.0 - math.exp(-kappa_tau)) / kappa_tau if kappa_tau > 1e-12 else 1.0
    average_variance = max(params.theta + (params.v0 - params.theta) * drift, 1e-12)
    upper = min(max(INTEGRATION_UPPER, math.sqrt(2.0 * DECAY_EXPONENT / (average_variance * tau))), MAX_INTEGRATION_UPPER)
    n_nodes = max(QUADRATURE_NODES, math.ceil(QUADRATURE_NODES * upper / INTEGRATION_UPPER))
    nodes, weights = _legendre(n_nodes)
    half = 0.5 * (upper - INTEGRATION_LOWER)
    return INTEGRATION_LOWER + half * (nodes + 1.0), half * weights


def _characteristic(phi, params, tau, j):
    """Fonction caractéristique P_j, forme à logarithme stable (pas de saut de branche)"""
    kappa, theta, xi, rho = params.kappa, params.theta, params.xi, params.rho
    u = 0.5 if j == 1 else -0.5
    b = kappa - rho * xi if j == 1 else kappa
    rsi = rho * xi * 1j * phi
    d = np.sqrt((rsi - b) ** 2 - xi ** 2 * (2.0 * u * 1j * phi - phi ** 2))
    g = (b - rsi - d) / (b - rsi + d)
    decay = np.exp(-d * tau)
    big_c = params.r * 1j * phi * tau + kappa * theta / xi ** 2 * (
        (b - rsi - d) * tau - 2.0 * np.log((1.0 - g * decay) / (1.0 - g))
    )
    big_d = (b - rsi - d) / xi ** 2 * (1.0 - decay) / (1.0 - g * decay)
    return np.exp(big_c + big_d * params.v0 + 1j * phi * math.log(params.s0))


def _deterministic_variance_call(params, strike, tau):
    """Limite xi -> 0 : Black-Scholes avec la variance moyenne intégrée"""
    kappa_tau = params.kappa * tau
    drift = (1.0 - math.exp(-kappa_tau)) / kappa_tau if kappa_tau > 1e-12 else 1.0
    average_variance = max(params.theta + (params.v0 - params.theta) * drift, 0.0)
    return bs_price_array(params.s0, strike, params.r, math.sqrt(average_variance), tau, True)


def heston_price(params, strike, tau, option_type="call"):
    """Prix européen de Heston (formulation P1/P2, quadrature de Gauss-Legendre).

    ``strike`` peut être un scalaire ou un tableau. Le put est obtenu par
    parité call-put.
    """
    if option_type not in ("call", "put"):
        raise PricingError(f"type d'option inconnu : {option_type}")
    strikes = np.atleast_1d(np.asarray(strike, dtype=np.float64))
    if (strikes <= 0).any():
        raise PricingError("strike strictement positif requis")
    if not tau > 0:
        raise PricingError(f"maturité strictement positive requise pour Heston (reçu {tau})")

    if params.xi < DETERMINISTIC_XI:
        calls = _deterministic_variance_call(params, strikes, tau)
    else:
        phi, weights = _integration_grid(params, tau)
        log_strikes = np.log(strikes)[:, None]
        integrals = []
        for j in (1, 2):
            values = _characteristic(phi, params, tau, j)
            integrand = np.real(np.exp(-1j * phi * log_strikes) * values / (1j * phi))
            if not np.isfinite(integrand).all():
                raise PricingError(
                    f"intégrande de Heston non fini (tau={tau}, v0={params.v0}, xi={params.xi})"
                )
            integrals.append(0.5 + integrand @ weights / math.pi)
        discounted = strikes * math.exp(-params.r * tau)
        calls = params.s0 * integrals[0] - discounted * integrals[1]
        # bornes de non-arbitrage
        calls = np.clip(calls, np.maximum(params.s0 - discounted, 0.0), params.s0)

    if option_type == "call":
        prices = calls
    else:
        prices = calls - params.s0 + strikes * math.exp(-params.r * tau)
    return prices if np.ndim(strike) else float(prices[0])


# ==================== PRÉVISIONS PAR PRICER ====================
@dataclass(frozen=True)
class HestonBaselineConfig:
    kappa: float = 2.0
    theta: float = None
    xi: float = 0.3
    rho: float = -0.7


def _last_state(sample):
    last = sample.encoder_raw[-1]
    return last[_SPOT], last[_VOL], last[_TTM], last[_STRIKE], last[_TYPE] >= 0.5


def _horizon(sample, horizon):
    return len(sample.target_raw) if horizon is None else int(horizon)


def bs_forecast(sample, horizon=None, rate=0.02):
    spot, vol, ttm, strike, is_call = _last_state(sample)
    taus = ttm - np.arange(1, _horizon(sample, horizon) + 1) / 365.0
    expired = taus <= 0
    prices = bs_price_array(spot, strike, rate, vol, np.maximum(taus, 0.0), is_call)
    intrinsic = np.maximum(spot - strike, 0.0) if is_call else np.maximum(strike - spot, 0.0)
    return np.where(expired, intrinsic, prices)


def heston_forecast(sample, horizon=None, baseline=None, rate=0.02):
    baseline = baseline or HestonBaselineConfig()
    spot, vol, ttm, strike, is_call = _last_state(sample)
    v0 = float(vol) ** 2
    params = HestonParams(
        s0=float(spot), v0=v0, kappa=baseline.kappa,
        theta=v0 if baseline.theta is None else baseline.theta,
        xi=baseline.xi, rho=baseline.rho, r=rate,
    )
    option_type = "call" if is_call else "put"
    intrinsic = max(spot - strike, 0.0) if is_call else max(strike - spot, 0.0)
    prices = []
    for h in range(1, _horizon(sample, horizon) + 1):
        tau = ttm - h / 365.0
        prices.append(intrinsic if tau <= 0 else heston_price(params, strike, tau, option_type))
    return np.array(prices, dtype=np.float64)


def persistence_forecast(sample, horizon=None):
    return np.full(_horizon(sample, horizon), float(sample.anchor_price))


# ==================== LSTM ====================
GATES = ("i", "f", "o", "g")


@dataclass(frozen=True)
class LstmConfig:
    n_features: int = len(FEATURE_NAMES)
    hidden_size: int = 32
    t_y: int = 30

    def __post_init__(self):
        if min(self.n_features, self.hidden_size, self.t_y) < 1:
            raise ConfigError("dimensions du LSTM strictement positives requises")


def lstm_parameter_shapes(config):
    shapes = {}
    for gate in GATES:
        shapes[f"lstm.W_{gate}"] = (config.n_features, config.hidden_size)
        shapes[f"lstm.U_{gate}"] = (config.hidden_size, config.hidden_size)
        shapes[f"lstm.b_{gate}"] = (config.hidden_size,)
    shapes["head.W"] = (config.hidden_size, config.t_y)
    shapes["head.b"] = (config.t_y,)
    return shapes


def lstm_step(x_t, h, c, params):
    """Une étape de cellule : portes i, f, o sigmoïdes, candidat g en tanh"""
    def gate(name):
        return te.add(te.add(te.matmul(x_t, params[f"lstm.W_{name}"]), te.matmul(h, params[f"lstm.U_{name}"])),
                      params[f"lstm.b_{name}"])

    i, f, o = te.sigmoid(gate("i")), te.sigmoid(gate("f")), te.sigmoid(gate("o"))
    candidate = te.tanh(gate("g"))
    c = te.add(te.mul(f, c), te.mul(i, candidate))
    h = te.mul(o, te.tanh(c))
    return h, c


class LstmForecaster:
    """LSTM à une couche ; la tête linéaire émet les T_y valeurs depuis le dernier état caché"""

    kind = "lstm"

    def __init__(self, config, seed=0, arrays=None):
        self.config = config
        self.params = {}
        if arrays is None:
            rng = make_rng(sub_seed(seed, "init"))
            bound = 1.0 / math.sqrt(config.hidden_size)
            arrays = {
                name: (np.zeros(shape) if name.split(".")[-1].startswith("b")
                       else rng.uniform(-bound, bound, size=shape))
                for name, shape in lstm_parameter_shapes(config).items()
            }
        self.load_parameters(arrays)

    def parameters(self):
        return dict(self.params)

    def load_parameters(self, arrays):
        expected = lstm_parameter_shapes(self.config)
        if set(arrays) != set(expected):
            raise ConfigError(f"paramètres LSTM inattendus : {sorted(set(arrays) ^ set(expected))}")
        for name, shape in expected.items():
            value = arrays[name].data if isinstance(arrays[name], te.Tensor) else arrays[name]
            if tuple(np.shape(value)) != shape:
                raise ConfigError(f"forme de {name} : {np.shape(value)} au lieu de {shape}")
            self.params[name] = arrays[name] if isinstance(arrays[name], te.Tensor) else te.Tensor(value, requires_grad=True)

    def n_parameters(self):
        return sum(int(np.prod(shape)) for shape in lstm_parameter_shapes(self.config).values())

    def predict(self, encoder_input, decoder_known=None, training=False, trace=None):
        """``encoder_input`` (..., T_x, F) -> (..., T_y) en espace normalisé"""
        inputs = encoder_input if isinstance(encoder_input, te.Tensor) else te.Tensor(encoder_input)
        if inputs.shape[-1] != self.config.n_features:
            raise ConfigError(f"{inputs.shape[-1]} caractéristiques reçues, {self.config.n_features} attendues")
        state_shape = inputs.shape[:-2] + (1, self.config.hidden_size)
        h = te.Tensor(np.zeros(state_shape))
        c = te.Tensor(np.zeros(state_shape))
        for t in range(inputs.shape[-2]):
            h, c = lstm_step(te.slice_rows(inputs, t, t + 1), h, c, self.params)
        out = te.add(te.matmul(h, self.params["head.W"]), self.params["head.b"])
        return te.reshape(out, out.shape[:-2] + (self.config.t_y,))

    def describe(self):
        return asdict(self.config)


def lstm_forecast_model(config=None, seed=0):
    return LstmForecaster(config or LstmConfig(), seed=seed)
