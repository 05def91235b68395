# synthetic_market.py
"""Marché synthétique : sous-jacent de Heston et chaîne d'options cotée par le pricer de Heston.

Le générateur remplace un historique réel de cotations. La colonne implied_vol
est un proxy (racine de la variance instantanée), pas une inversion de
Black-Scholes.
"""
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from data_pipeline import CHAIN_COLUMNS, OptionRecord
from utils import ConfigError, PricingError, make_rng, sub_seed

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
TRADING_DAYS_PER_YEAR = 252


# ==================== PARAMÈTRES ====================
@dataclass(frozen=True)
class HestonParams:
    s0: float = 100.0
    v0: float = 0.04
    kappa: float = 2.0
    theta: float = 0.04
    xi: float = 0.3
    rho: float = -0.7
    r: float = 0.02

    def __post_init__(self):
        if not self.s0 > 0:
            raise ConfigError(f"s0 doit être strictement positif (reçu {self.s0})")
        for name in ("v0", "kappa", "theta", "xi"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} doit être positif ou nul (reçu {getattr(self, name)})")
        if abs(self.rho) > 1:
            raise ConfigError(f"rho doit être dans [-1, 1] (reçu {self.rho})")

    def with_state(self, spot, variance):
        return replace(self, s0=float(spot), v0=float(variance))


@dataclass(frozen=True)
class ScenarioConfig:
    days: int = 1200
    start_date: str = "2016-01-04"
    expiry_spacing: int = 126
    contract_life: int = 252
    strike_multipliers: tuple = (0.6, 0.9, 1.1, 1.9)
    strike_step: float = 0.5
    volume_mean: float = 200.0
    zero_volume_prob: float = 0.02

    def __post_init__(self):
        if self.days < 1:
            raise ConfigError(f"le scénario doit couvrir au moins un jour (reçu {self.days})")
        if self.expiry_spacing < 1 or self.contract_life < 1:
            raise ConfigError("espacement des échéances et durée de vie doivent être positifs")
        if not self.strike_multipliers or min(self.strike_multipliers) <= 0:
            raise ConfigError("multiplicateurs de strike positifs requis")


@dataclass(frozen=True)
class HestonPath:
    spot: np.ndarray
    variance: np.ndarray
    dt: float

    def __len__(self):
        return len(self.spot)


@dataclass(frozen=True)
class Listing:
    """Une échéance cotée : premier jour de cotation et grille de strikes"""
    expiry_date: object
    first_day: int
    strikes: tuple


# ==================== SIMULATION ====================
def simulate_heston_paths(params, n_days, n_paths, dt=1.0 / TRADING_DAYS_PER_YEAR, seed=0, terminal_only=False):
    """Euler à troncature complète pour v, Euler logarithmique pour S.

    Le jour 0 est l'état initial (s0, v0). Avec ``terminal_only`` seules les
    valeurs du dernier jour sont renvoyées, de forme (n_paths,).
    """
    if n_days < 1 or n_paths < 1:
        raise ConfigError(f"n_days et n_paths doivent être >= 1 (reçus {n_days}, {n_paths})")
    rng = make_rng(seed)
    log_spot = np.full(n_paths, math.log(params.s0))
    variance = np.full(n_paths, float(params.v0))
    if not terminal_only:
        spots = np.empty((n_paths, n_days))
        variances = np.empty((n_paths, n_days))
        spots[:, 0] = params.s0
        variances[:, 0] = params.v0
    orthogonal = math.sqrt(1.0 - params.rho ** 2)
    sqrt_dt = math.sqrt(dt)
    for day in range(1, n_days):
        z_v = rng.standard_normal(n_paths)
        z_s = params.rho * z_v + orthogonal * rng.standard_normal(n_paths)
        v_plus = np.maximum(variance, 0.0)
        vol = np.sqrt(v_plus)
        log_spot = log_spot + (params.r - 0.5 * v_plus) * dt + vol * sqrt_dt * z_s
        variance = variance + params.kappa * (params.theta - v_plus) * dt + params.xi * vol * sqrt_dt * z_v
        if not terminal_only:
            spots[:, day] = np.exp(log_spot)
            variances[:, day] = variance
    if terminal_only:
        return np.exp(log_spot), variance
    return spots, variances


def simulate_heston(params, n_days, dt=1.0 / TRADING_DAYS_PER_YEAR, seed=0):
    spots, variances = simulate_heston_paths(params, n_days, 1, dt=dt, seed=seed)
    return HestonPath(spot=spots[0], variance=variances[0], dt=dt)


# ==================== CALENDRIER ET COTATIONS ====================
def trading_calendar(scenario):
    """Jours ouvrés, prolongés au-delà du dernier jour coté pour placer les échéances"""
    return pd.bdate_range(start=scenario.start_date, periods=scenario.days + scenario.contract_life + 1)


def build_listings(path, calendar, scenario):
    """Une échéance tous les ``expiry_spacing`` jours, cotée ``contract_life`` jours avant"""
    listings = []
    first_expiry = scenario.expiry_spacing
    last_expiry = scenario.days + scenario.contract_life
    for expiry_day in range(first_expiry, last_expiry + 1, scenario.expiry_spacing):
        first_day = max(0, expiry_day - scenario.contract_life)
        if first_day >= scenario.days:
            break
        reference = path.spot[first_day]
        strikes = sorted({
            max(scenario.strike_step, round(reference * m / scenario.strike_step) * scenario.strike_step)
            for m in scenario.strike_multipliers
        })
        listings.append(Listing(expiry_date=calendar[expiry_day].date(), first_day=first_day,
                                strikes=tuple(float(k) for k in strikes)))
    return listings


def _volume_draw(rng, spot, strikes, scenario):
    moneyness = np.log(spot / np.asarray(strikes))
    mean_volume = scenario.volume_mean * np.exp(-8.0 * moneyness ** 2)
    volume = rng.poisson(mean_volume)
    volume[rng.random(len(volume)) < scenario.zero_volume_prob] = 0
    return volume


def synthesize_chain(path, calendar, listings, pricer, params, scenario, seed=0):
    """Cote chaque jour chaque contrat vivant (call puis put) avec l'état (S_t, v_t) du jour"""
    rng = make_rng(seed)
    records = []
    for day in range(len(path)):
        quote_date = calendar[day].date()
        spot = float(path.spot[day])
        variance = max(float(path.variance[day]), VARIANCE_FLOOR)
        state = params.with_state(spot, variance)
        implied_vol = math.sqrt(variance)
        for listing in listings:
            if listing.first_day > day or listing.expiry_date <= quote_date:
                continue
            tau = (listing.expiry_date - quote_date).days / 365.0
            strikes = np.asarray(listing.strikes)
            try:
                calls = np.atleast_1d(pricer(state, strikes, tau, "call"))
                puts = np.atleast_1d(pricer(state, strikes, tau, "put"))
            except PricingError as exc:
                raise PricingError(f"échec du pricer le {quote_date} (échéance {listing.expiry_date}) : {exc}") from exc
            call_volume = _volume_draw(rng, spot, strikes, scenario)
            put_volume = _volume_draw(rng, spot, strikes, scenario)
            for k, strike in enumerate(listing.strikes):
                for option_type, price, volume in (("call", calls[k], call_volume[k]), ("put", puts[k], put_volume[k])):
                    records.append(OptionRecord(
                        quote_date=quote_date,
                        expiry_date=listing.expiry_date,
                        strike=strike,
                        option_type=option_type,
                        underlying_price=spot,
                        implied_vol=implied_vol,
                        mid_price=max(float(price), 0.0),
                        volume=int(volume),
                    ))
    return records


def generate_chain(params, scenario, seed=0, pricer=None):
    """Scénario complet : trajectoire, calendrier, échéances puis cotations"""
    if pricer is None:
        from baselines import heston_price
        pricer = heston_price
    path = simulate_heston(params, scenario.days, seed=sub_seed(seed, "path"))
    calendar = trading_calendar(scenario)
    listings = build_listings(path, calendar, scenario)
    records = synthesize_chain(path, calendar, listings, pricer, params, scenario, seed=sub_seed(seed, "volume"))
    logger.info("chaîne synthétique : %d cotations, %d échéances, %d jours", len(records), len(listings), scenario.days)
    return records


# ==================== ÉCRITURE ====================
def write_chain_csv(records, path):
    """Schéma exact de data_pipeline ; flottants écrits avec repr (relecture exacte)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [
            (
                r.quote_date.isoformat(), r.expiry_date.isoformat(), repr(float(r.strike)), r.option_type,
                repr(float(r.underlying_price)), repr(float(r.implied_vol)), repr(float(r.mid_price)), str(int(r.volume)),
            )
            for r in records
        ],
        columns=list(CHAIN_COLUMNS),
    )
    try:
        frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"écriture impossible de la chaîne {path} : {exc}") from exc
    return path
