# evaluation.py
"""Métriques de précision, backtest directionnel et émission des rapports."""
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.metrics import mean_absolute_error, mean_squared_error

from utils import BacktestError, LabError, load_json, save_json

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
PREDICTION_COLUMNS = ("contract_id", "date", "horizon_step", "actual", "predicted", "model")
TRADE_COLUMNS = ("contract_id", "window_end_date", "anchor_price", "predicted_final", "realized_final", "position", "log_return")


# ==================== TYPES ====================
@dataclass(frozen=True)
class TradeRecord:
    contract_id: str
    window_end_date: str
    anchor_price: float
    predicted_final: float
    realized_final: float
    position: str          # long | short | flat
    log_return: float


@dataclass(frozen=True)
class MetricsReport:
    label: str
    mae: float
    rmse: float
    direction_accuracy_pct: float
    final_day_mae: float
    net_value: float
    n_sequences: int


@dataclass
class BacktestResult:
    report: MetricsReport
    trades: list
    samples: list
    predictions: np.ndarray


# ==================== MÉTRIQUES ====================
def _check_pair(preds, targets):
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.size == 0:
        raise LabError("métrique demandée sur une entrée vide")
    if preds.shape != targets.shape:
        raise LabError(f"prévisions {preds.shape} et cibles {targets.shape} de formes différentes")
    return preds.reshape(-1), targets.reshape(-1)


def mae(preds, targets):
    preds, targets = _check_pair(preds, targets)
    return float(mean_absolute_error(targets, preds))


def rmse(preds, targets):
    preds, targets = _check_pair(preds, targets)
    return float(math.sqrt(mean_squared_error(targets, preds)))


def _sign(value):
    return (value > 0) - (value < 0)


def direction_accuracy(samples, predictions):
    """% de séquences où variation prévue et réalisée ont le même signe (0 == 0 compte juste)"""
    if not samples:
        raise LabError("exactitude directionnelle sur une entrée vide")
    correct = sum(
        _sign(float(pred[-1]) - sample.anchor_price) == _sign(float(sample.target_raw[-1]) - sample.anchor_price)
        for sample, pred in zip(samples, predictions)
    )
    return 100.0 * correct / len(samples)


def final_day_mae(samples, predictions):
    if not samples:
        raise LabError("MAE du dernier jour sur une entrée vide")
    return mae([pred[-1] for pred in predictions], [sample.target_raw[-1] for sample in samples])


def sequence_return(y_t, y_final, predicted_final):
    """R = ln(y_T / y_t) * signe(ŷ_T - y_t), signe(0) = 0"""
    if y_t <= 0 or y_final <= 0:
        raise LabError(f"prix non positif dans le calcul du rendement (y_t={y_t}, y_T={y_final})")
    direction = _sign(predicted_final - y_t)
    return math.log(y_final / y_t) * direction if direction else 0.0


def cumulative_net_value(returns):
    """NV = 1 + Σ R_i (additif, non composé)"""
    return 1.0 + math.fsum(returns)


# ==================== BACKTEST ====================
def _trade(sample, prediction):
    y_t = float(sample.anchor_price)
    y_final = float(sample.target_raw[-1])
    predicted_final = float(prediction[-1])
    direction = _sign(predicted_final - y_t)
    if y_t > 0 and y_final > 0:
        log_return = sequence_return(y_t, y_final, predicted_final)
    else:
        logger.warning("séquence %s au %s : prix non positif, position neutre", sample.contract_id, sample.window_end_date)
        log_return, direction = 0.0, 0
    position = {1: "long", -1: "short", 0: "flat"}[direction]
    return TradeRecord(sample.contract_id, sample.window_end_date.isoformat(), y_t, predicted_final,
                       y_final, position, log_return)


def backtest(forecaster, test_samples, label="model"):
    """Prévoit chaque fenêtre (ordre chronologique) et assemble métriques et transactions"""
    if not test_samples:
        raise BacktestError("backtest sur un ensemble de test vide")
    ordered = sorted(test_samples, key=lambda s: (s.window_end_date, s.contract_id))
    predictions = []
    for sample in ordered:
        try:
            prediction = np.asarray(forecaster(sample), dtype=np.float64)
        except Exception as exc:
            raise BacktestError(f"échec du prévisionniste '{label}' sur {sample.contract_id} "
                                f"au {sample.window_end_date} : {exc}") from exc
        if prediction.shape != sample.target_raw.shape or not np.isfinite(prediction).all():
            raise BacktestError(f"prévision invalide de '{label}' sur {sample.contract_id} au {sample.window_end_date}")
        predictions.append(prediction)
    predictions = np.stack(predictions)
    actuals = np.stack([sample.target_raw for sample in ordered])
    trades = [_trade(sample, prediction) for sample, prediction in zip(ordered, predictions)]
    report = MetricsReport(
        label=label,
        mae=mae(predictions, actuals),
        rmse=rmse(predictions, actuals),
        direction_accuracy_pct=direction_accuracy(ordered, predictions),
        final_day_mae=final_day_mae(ordered, predictions),
        net_value=cumulative_net_value([trade.log_return for trade in trades]),
        n_sequences=len(ordered),
    )
    logger.info("%s : MAE=%.4f RMSE=%.4f DA=%.2f%% NV=%.4f", label, report.mae, report.rmse,
                report.direction_accuracy_pct, report.net_value)
    return BacktestResult(report=report, trades=trades, samples=ordered, predictions=predictions)


# ==================== RAPPORTS ====================
def emit_report(reports, path):
    payload = {"schema_version": REPORT_SCHEMA_VERSION, "models": [asdict(report) for report in reports]}
    save_json(payload, path)
    return Path(path)


def parse_report(path):
    payload = load_json(path)
    if payload.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise LabError(f"version de rapport non supportée dans {path} : {payload.get('schema_version')}")
    names = {f.name for f in fields(MetricsReport)}
    reports = []
    for entry in payload["models"]:
        if set(entry) != names:
            raise LabError(f"rapport {path} : champs inattendus {sorted(set(entry) ^ names)}")
        reports.append(MetricsReport(**entry))
    return reports


def predictions_frame(results):
    """Une ligne par (séquence, pas d'horizon, modèle)"""
    rows = []
    for result in results:
        for sample, prediction in zip(result.samples, result.predictions):
            for step, (day, actual, predicted) in enumerate(zip(sample.target_dates, sample.target_raw, prediction), start=1):
                rows.append((sample.contract_id, day.isoformat(), step, float(actual), float(predicted), result.report.label))
    return pd.DataFrame(rows, columns=list(PREDICTION_COLUMNS))


def emit_predictions_csv(results, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    predictions_frame(results).to_csv(path, index=False, lineterminator="\n")
    return path


def emit_trades_csv(trades, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([asdict(trade) for trade in trades], columns=list(TRADE_COLUMNS)).to_csv(
        path, index=False, lineterminator="\n")
    return path


def format_tables(reports):
    """Trois tableaux : métriques globales, dernier jour, valeur nette"""
    frame = pd.DataFrame([asdict(report) for report in reports])
    if frame.empty:
        return "(aucun modèle)"
    frame = frame.set_index("label")
    frame.index.name = "Modèle"
    sections = [
        ("Métriques globales", frame[["mae", "rmse"]].rename(columns={"mae": "MAE", "rmse": "RMSE"})),
        ("Dernier jour", frame[["direction_accuracy_pct", "final_day_mae"]].rename(
            columns={"direction_accuracy_pct": "DA (%)", "final_day_mae": "MAE dernier jour"})),
        ("Valeur nette", frame[["net_value"]].rename(columns={"net_value": "Valeur nette"})),
    ]
    return "\n\n".join(f"== {title} ==\n{table.to_string(float_format=lambda v: f'{v:.4f}')}" for title, table in sections)
