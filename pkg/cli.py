# cli.py
"""Point d'entrée unique : generate | prepare | train | evaluate | backtest | compare | search"""
import argparse
import logging
import sys
from dataclasses import asdict
from functools import partial

from baselines import bs_forecast, heston_forecast, lstm_forecast_model, persistence_forecast
from config import DEFAULT_CONFIG, RunConfig
from data_pipeline import load_dataset, parse_chain_with_issues, prepare_dataset, save_dataset
from evaluation import backtest, emit_predictions_csv, emit_report, emit_trades_csv, format_tables
from informer_model import InformerForecaster, load_checkpoint, model_forecaster, rebuild_model, save_checkpoint
from synthetic_market import generate_chain, write_chain_csv
from training import evaluate_loss, random_search, train
from utils import LabError, configure_logging, save_json, sub_seed

logger = logging.getLogger(__name__)

LEARNED_MODELS = ("informer", "lstm")
ALL_MODELS = ("informer", "lstm", "black-scholes", "heston", "persistence")
MODEL_LABELS = {
    "informer": "Informer",
    "lstm": "LSTM",
    "black-scholes": "Black-Scholes",
    "heston": "Heston",
    "persistence": "Persistence",
}


# ==================== COMMANDES ====================
def cmd_generate(config):
    records = generate_chain(config.heston, config.scenario, seed=sub_seed(config.seed, "data"))
    path = write_chain_csv(records, config.chain_path)
    dates = sorted({record.quote_date for record in records})
    span = f"{dates[0]} -> {dates[-1]}" if dates else "vide"
    print(f"{len(records)} cotations écrites dans {path} ({len(dates)} dates, {span})")
    return path


def cmd_prepare(config):
    records, issues = parse_chain_with_issues(config.chain_path)
    if not records:
        raise LabError(f"aucune cotation lisible dans {config.chain_path}")
    prepared = prepare_dataset(records, config.data)
    kept = len(records) - sum(prepared.tally.values())
    save_dataset(config.dataset_path, prepared)
    print(f"{len(records)} cotations lues, {len(issues)} lignes rejetées au format, {kept} retenues")
    print("rejets par motif : " + ", ".join(f"{reason}={count}" for reason, count in sorted(prepared.tally.items())))
    counts = prepared.split.counts()
    print(f"fenêtres : train={counts['train']} validation={counts['validation']} test={counts['test']}")
    return prepared


def build_model(config, model_kind):
    if model_kind == "informer":
        return InformerForecaster(config.model, seed=config.seed)
    if model_kind == "lstm":
        return lstm_forecast_model(config.lstm, seed=config.seed)
    raise LabError(f"modèle non entraînable : {model_kind}")


def cmd_train(config, model_kind="informer"):
    dataset = load_dataset(config.dataset_path)
    result = train(partial(build_model, config, model_kind), dataset.split, config.train)
    path = save_checkpoint(config.checkpoint_path(model_kind), result.model, dataset.normalizer,
                           result.history.best_val_loss)
    result.history.save_csv(config.out_dir / f"{model_kind}_history.csv")
    print(f"{MODEL_LABELS[model_kind]} : meilleure époque {result.history.best_epoch}, "
          f"val_loss={result.history.best_val_loss:.6e}, arrêt {result.history.stop_reason} -> {path}")
    return path


def resolve_forecaster(config, model_kind):
    """Prévisionniste (fenêtre -> prix bruts) pour un nom de modèle"""
    if model_kind in LEARNED_MODELS:
        checkpoint = load_checkpoint(config.checkpoint_path(model_kind))
        if checkpoint.model_kind != model_kind:
            raise LabError(f"le checkpoint {config.checkpoint_path(model_kind)} contient un modèle {checkpoint.model_kind}")
        return model_forecaster(rebuild_model(checkpoint), checkpoint.normalizer)
    if model_kind == "black-scholes":
        return partial(bs_forecast, rate=config.rate)
    if model_kind == "heston":
        return partial(heston_forecast, baseline=config.heston_baseline, rate=config.rate)
    if model_kind == "persistence":
        return persistence_forecast
    raise LabError(f"modèle inconnu : {model_kind}")


def cmd_evaluate(config, model_kind="informer", split="test"):
    dataset = load_dataset(config.dataset_path)
    samples = dataset.split.test if split == "test" else dataset.split.validation
    result = backtest(resolve_forecaster(config, model_kind), samples, MODEL_LABELS[model_kind])
    emit_report([result.report], config.out_dir / f"report_{model_kind}_{split}.json")
    emit_predictions_csv([result], config.out_dir / f"predictions_{model_kind}_{split}.csv")
    print(format_tables([result.report]))
    return result.report


def cmd_backtest(config, model_kind="informer"):
    dataset = load_dataset(config.dataset_path)
    result = backtest(resolve_forecaster(config, model_kind), dataset.split.test, MODEL_LABELS[model_kind])
    emit_report([result.report], config.out_dir / f"backtest_{model_kind}.json")
    emit_predictions_csv([result], config.out_dir / f"predictions_{model_kind}_test.csv")
    emit_trades_csv(result.trades, config.out_dir / f"trades_{model_kind}.csv")
    longs = sum(trade.position == "long" for trade in result.trades)
    shorts = sum(trade.position == "short" for trade in result.trades)
    print(f"{result.report.label} : {longs} long, {shorts} short, "
          f"{len(result.trades) - longs - shorts} neutres, valeur nette {result.report.net_value:.4f}")
    return result.report


def cmd_compare(config, reuse_checkpoints=False):
    """Entraîne ou recharge les modèles appris, évalue les cinq modèles sur le test"""
    dataset = load_dataset(config.dataset_path)
    for model_kind in LEARNED_MODELS:
        if not (reuse_checkpoints and config.checkpoint_path(model_kind).exists()):
            cmd_train(config, model_kind)
    results = [
        backtest(resolve_forecaster(config, model_kind), dataset.split.test, MODEL_LABELS[model_kind])
        for model_kind in ALL_MODELS
    ]
    reports = [result.report for result in results]
    emit_report(reports, config.out_dir / "comparison.json")
    emit_predictions_csv(results, config.out_dir / "comparison_predictions.csv")
    print(format_tables(reports))
    return reports


def cmd_search(config):
    dataset = load_dataset(config.dataset_path)
    result = random_search(config.search_space, config["search_trials"], config.seed,
                           config["search_budget_epochs"], dataset.split, config.model, config.train)
    payload = {
        "best_trial": result.best.index,
        "trials": [
            {
                "index": trial.index,
                "model_config": asdict(trial.model_config),
                "lr": trial.train_config.lr,
                "best_val_loss": trial.best_val_loss,
                "n_parameters": trial.n_parameters,
            }
            for trial in result.trials
        ],
    }
    save_json(payload, config.out_dir / "search.json")
    best = result.best
    print(f"meilleur essai {best.index} : val_loss={best.best_val_loss:.6e}, "
          f"{best.n_parameters} paramètres, lr={best.train_config.lr:.2e}")
    return result


def check_checkpoint(config, model_kind):
    """Réévalue la perte de validation d'un checkpoint"""
    dataset = load_dataset(config.dataset_path)
    checkpoint = load_checkpoint(config.checkpoint_path(model_kind))
    model = rebuild_model(checkpoint)
    return evaluate_loss(model, dataset.split.validation, config.train.resolve_weights(config["t_y"]),
                         config["batch_size"]), checkpoint.best_val_loss


# ==================== ARGUMENTS ====================
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="fichier key=value (voir lab.conf)")
    common.add_argument("--seed", type=int, help=f"graine racine (défaut {DEFAULT_CONFIG['seed']})")
    common.add_argument("--out", help="répertoire de sortie")

    parser = argparse.ArgumentParser(prog="optlab", description="Laboratoire de prévision de prix d'options")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", parents=[common], help="génère une chaîne synthétique")
    generate.add_argument("--days", type=int, help="nombre de jours ouvrés simulés")

    commands.add_parser("prepare", parents=[common], help="filtres, fenêtres et découpage")

    train_cmd = commands.add_parser("train", parents=[common], help="entraîne un modèle")
    train_cmd.add_argument("--model", choices=LEARNED_MODELS, default="informer")
    train_cmd.add_argument("--epochs", type=int, help="nombre maximal d'époques")
    train_cmd.add_argument("--patience", type=int)

    evaluate_cmd = commands.add_parser("evaluate", parents=[common], help="métriques sur un sous-ensemble")
    evaluate_cmd.add_argument("--model", choices=ALL_MODELS, default="informer")
    evaluate_cmd.add_argument("--split", choices=("test", "validation"), default="test")

    backtest_cmd = commands.add_parser("backtest", parents=[common], help="stratégie directionnelle sur le test")
    backtest_cmd.add_argument("--model", choices=ALL_MODELS, default="informer")

    compare = commands.add_parser("compare", parents=[common], help="compare les cinq modèles")
    compare.add_argument("--epochs", type=int)
    compare.add_argument("--patience", type=int)
    compare.add_argument("--reuse-checkpoints", action="store_true", help="recharge les checkpoints existants")

    search = commands.add_parser("search", parents=[common], help="recherche aléatoire d'hyperparamètres")
    search.add_argument("--trials", type=int)
    search.add_argument("--budget-epochs", type=int)
    return parser


def _overrides(args):
    return {
        "seed": args.seed,
        "out_dir": args.out,
        "days": getattr(args, "days", None),
        "max_epochs": getattr(args, "epochs", None),
        "patience": getattr(args, "patience", None),
        "search_trials": getattr(args, "trials", None),
        "search_budget_epochs": getattr(args, "budget_epochs", None),
    }


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.load(args.config, _overrides(args))
        configure_logging(config["log_level"])
        if args.command == "generate":
            cmd_generate(config)
        elif args.command == "prepare":
            cmd_prepare(config)
        elif args.command == "train":
            cmd_train(config, args.model)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.model, args.split)
        elif args.command == "backtest":
            cmd_backtest(config, args.model)
        elif args.command == "compare":
            cmd_compare(config, args.reuse_checkpoints)
        elif args.command == "search":
            cmd_search(config)
    except LabError as exc:
        print(f"erreur: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"erreur: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
