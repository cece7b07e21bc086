"""
This script contains helping functions for run directories and output files.
"""

import json
import logging
import math
import os
import subprocess

import numpy as np

__all__ = ["compose_filename",
           "git_commit",
           "run_directory",
           "write_frame",
           "write_json",
           "write_text"]

logger = logging.getLogger(__name__)


def git_commit():
    """ Short commit hash of the working tree, '' outside a git checkout. """
    try:
        return subprocess\
            .check_output(['git', 'rev-parse', '--short', 'HEAD'], stderr=subprocess.DEVNULL)\
            .strip()\
            .decode('ascii')
    except (subprocess.CalledProcessError, OSError):
        return ''


def compose_filename(prefix, extension, *tags):
    """
    Deterministic filename from a prefix, optional tags and the commit hash.

    INPUT:
        - prefix: file name prefix
        - extension: file extension
        - tags: extra identifiers (e.g. shape, width)

    OUTPUT:
        - fname: e.g. bench_4096x12288_fp32_1a2b3c4.csv
    """
    ident = filter(None, [prefix, *map(str, tags), git_commit()])
    return f"{'_'.join(ident)}.{extension}"


def run_directory(root, config, force=False):
    """
    Content-addressed run directory root/run-<sha256[:12] of the effective config>.
    An existing directory is only reused with force=True.
    """
    path = os.path.join(root, f"run-{config.config_hash()[:12]}")
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} already exists; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    write_text(os.path.join(path, "config.txt"), config.to_text())
    logger.info("writing run to %s", path)
    return path


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(_clean(obj), f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")


def write_frame(path, frame):
    frame.to_csv(path, index=False)


def write_text(path, text):
    with open(path, "w") as f:
        f.write(text)
