"""
Django settings for the imco_lab project.

The project has no web surface: it carries the ``fewshot`` app, its management
commands and the experiment defaults every command starts from.
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "imco-lab-development-only-key")

DEBUG = os.getenv("DJANGO_DEBUG", "0") == "1"

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "fewshot",
]

# Experiments keep their state in CSV and JSON files, not in a database.
DATABASES = {}


# Internationalization
# https://docs.djangoproject.com/en/5.2/topics/i18n/

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True


# Experiment defaults. Config files and command-line flags override these keys.

IMCO_OUTPUT_ROOT = os.getenv("IMCO_OUTPUT_ROOT", "runs")

IMCO_DEFAULTS = {
    # dataset
    "dataset": "blobs",
    "csv_path": "",
    "num_classes": 14,
    "dim": 16,
    "samples_per_class": 200,
    "center_scale": 5.0,
    "spread": 1.0,
    "test_fraction": 0.2,
    # schedule
    "base_count": 6,
    "session_size": 2,
    "shots": 5,
    # network
    "hidden_dims": "64,32,32",
    # implanting
    "pretrain_episodes": 300,
    "way": 5,
    "query": 15,
    "beta_a": 1.5,
    "beta_b": 1.5,
    "mix_space": "embedding",
    "prototype_metric": "dot",
    "pretrain_lr": 0.005,
    "momentum": 0.9,
    "head_epochs": 20,
    "closed_set_epochs": 30,
    "batch_size": 64,
    # compressing
    "dmf_lr": 0.001,
    "max_step": 0.01,
    "damping": 0.3,
    "error_coef": 0.4,
    "alpha_min": 0.01,
    "alpha_max": 1.0,
    "tunable_top_layers": 2,
    "iterations": 200,
    "adv_lr": 0.0,
    "adv_epochs": 1,
    "finetune_lr": 0.05,
    # run
    "method": "imco",
    "seed": 0,
    "out_dir": IMCO_OUTPUT_ROOT,
}


# Logging
# https://docs.djangoproject.com/en/5.2/topics/logging/

IMCO_LOG_LEVEL = os.getenv("IMCO_LOG_LEVEL", "INFO").upper()

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {
            "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "plain",
        },
    },
    "loggers": {
        "fewshot": {
            "handlers": ["console"],
            "level": IMCO_LOG_LEVEL,
            "propagate": False,
        },
    },
}
