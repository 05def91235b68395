# tests/conftest.py
import math
from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest

from data_pipeline import DataConfig, OptionRecord, prepare_dataset
from informer_model import ModelConfig


def make_record(quote_date=date(2020, 1, 2), expiry_date=date(2020, 6, 19), strike=100.0, option_type="call",
                underlying_price=100.0, implied_vol=0.2, mid_price=5.0, volume=10):
    return OptionRecord(quote_date, expiry_date, strike, option_type, underlying_price, implied_vol, mid_price, volume)


def trending_chain(n_days=80, strikes=(95.0, 100.0, 105.0), start="2020-01-02", expiry=date(2021, 6, 18)):
    """Chaîne lisse : sous-jacent en tendance, prix milieu proportionnels au spot"""
    records = []
    for day, stamp in enumerate(pd.bdate_range(start=start, periods=n_days)):
        spot = 100.0 + 0.1 * day + 2.0 * math.sin(day / 6.0)
        for strike in strikes:
            for option_type in ("call", "put"):
                intrinsic = max(spot - strike, 0.0) if option_type == "call" else max(strike - spot, 0.0)
                records.append(make_record(
                    quote_date=stamp.date(), expiry_date=expiry, strike=strike, option_type=option_type,
                    underlying_price=spot, implied_vol=0.2 + 0.001 * day, mid_price=intrinsic + 3.0 + 0.01 * day,
                    volume=5,
                ))
    return records


@pytest.fixture
def tiny_data_config():
    return DataConfig(t_x=8, t_y=4, t_label=2, stride=1)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(t_x=8, t_y=4, t_label=2, d_model=8, n_heads=2, n_encoder_layers=1,
                       n_decoder_layers=1, d_ff=4, dropout=0.0)


@pytest.fixture
def tiny_dataset(tiny_data_config):
    return prepare_dataset(trending_chain(n_days=40), tiny_data_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
