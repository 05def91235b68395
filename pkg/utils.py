# utils.py
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

# ==================== EXCEPTIONS ====================
class LabError(Exception):
    """Erreur de base du laboratoire : attrapée par la CLI, message affiché tel quel"""


class ShapeError(LabError, ValueError):
    """Formes de tenseurs incompatibles"""


class NonFiniteError(LabError, ValueError):
    """NaN ou infini détecté à la frontière d'une opération"""


class ChainFormatError(LabError):
    """Fichier de chaîne d'options illisible ou hors schéma"""


class SplitError(LabError):
    """Découpage chronologique impossible"""


class NormalizationError(LabError):
    """Normalisation non ajustée ou incohérente"""


class PricingError(LabError, ValueError):
    """Entrées de pricing invalides ou intégration en échec"""


class TrainingError(LabError):
    """Entraînement interrompu (perte non finie, jeu vide...)"""


class BacktestError(LabError):
    """Échec du prévisionniste sur un échantillon"""


class ConfigError(LabError, ValueError):
    """Clé ou valeur de configuration invalide"""


class CheckpointError(LabError):
    """Checkpoint manquant ou incompatible"""


# ==================== LOGGING ====================
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level="INFO"):
    """Installe un handler unique, ligne par ligne, sur stderr"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(str(level).upper())


# ==================== ALÉATOIRE ====================
def sub_seed(root_seed, name):
    """Dérive une graine nommée (data, init, dropout, shuffle, search...) depuis la graine racine"""
    if int(root_seed) < 0:
        raise ConfigError(f"la graine doit être positive ou nulle (reçu {root_seed})")
    sequence = np.random.SeedSequence([int(root_seed), zlib.crc32(name.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def make_rng(seed):
    """Générateur à compteur (Philox) ; un générateur existant est renvoyé tel quel"""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


# ==================== JSON ====================
def save_json(payload, path):
    """Écrit un document JSON stable (ordre des clés conservé)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=4, ensure_ascii=False)
        f.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
