import copy
import csv
import io
import re
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import yaml

from homokin.errors import ConfigError
from homokin.measure import EmpiricalMeasure
from homokin.models import Moments

PARTICLE_COLUMNS = ["x1", "x2", "x3", "w1", "w2", "w3"]
STRESS_COLUMNS = ["P11", "P12", "P13", "P22", "P23", "P33"]
_STRESS_INDEX = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


class DataParser:
    @classmethod
    def _table(cls, content: str, required: Sequence[str]) -> Dict[str, np.ndarray]:
        rows = [row for row in csv.reader(io.StringIO(content.strip())) if row]
        if not rows:
            raise ValueError("empty CSV")
        header = [h.strip() for h in rows[0]]
        missing = [c for c in required if c not in header]
        if missing:
            raise ValueError(f"CSV is missing columns: {missing}")
        try:
            values = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
        except ValueError as e:
            raise ValueError(f"non-numeric CSV value: {e}")
        if values.size == 0:
            values = values.reshape(0, len(header))
        if values.shape[1] != len(header):
            raise ValueError("CSV rows and header differ in length")
        return {name: values[:, k] for k, name in enumerate(header)}

    @classmethod
    def parse_particles(cls, content: str) -> Tuple[np.ndarray, np.ndarray]:
        """x1,x2,x3,w1,w2,w3 -> (x, w)"""
        table = cls._table(content, PARTICLE_COLUMNS)
        data = np.stack([table[c] for c in PARTICLE_COLUMNS], axis=1)
        return data[:, :3], data[:, 3:]

    @classmethod
    def parse_measure(cls, content: str) -> EmpiricalMeasure:
        table = cls._table(content, PARTICLE_COLUMNS)
        points = np.stack([table[c] for c in PARTICLE_COLUMNS], axis=1)
        weights = table.get("weight")
        return EmpiricalMeasure(points, weights)

    @classmethod
    def parse_moments(cls, content: str) -> List[Moments]:
        table = cls._table(content, ["t", "rho", "theta", "e"] + STRESS_COLUMNS)
        series = []
        for k in range(table["t"].size):
            P = np.zeros((3, 3))
            for name, (i, j) in zip(STRESS_COLUMNS, _STRESS_INDEX):
                P[i, j] = P[j, i] = table[name][k]
            q = [float(table[c][k]) if c in table else 0.0 for c in ("q1", "q2", "q3")]
            series.append(Moments(
                t=float(table["t"][k]), rho=float(table["rho"][k]), u_w=[0.0, 0.0, 0.0],
                e=float(table["e"][k]), theta=float(table["theta"][k]), P=P.tolist(), q=q,
            ))
        return series

    @classmethod
    def parse_series(cls, content: str, column: str) -> Tuple[np.ndarray, np.ndarray]:
        table = cls._table(content, ["t", column])
        return table["t"], table[column]

    @classmethod
    def read_particles(cls, filepath: str) -> Tuple[np.ndarray, np.ndarray]:
        return cls.parse_particles(Path(filepath).read_text(encoding="utf-8"))

    @classmethod
    def read_measure(cls, filepath: str) -> EmpiricalMeasure:
        return cls.parse_measure(Path(filepath).read_text(encoding="utf-8"))

    @classmethod
    def read_moments(cls, filepath: str) -> List[Moments]:
        return cls.parse_moments(Path(filepath).read_text(encoding="utf-8"))


class ConfigParser:
    OVERRIDE_PATTERN = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)=(.*)$", re.S)

    @classmethod
    def parse_override(cls, text: str) -> Tuple[List[str], object]:
        """'a.b=value' -> (['a', 'b'], value)，value 按 YAML 解析以保留类型"""
        match = cls.OVERRIDE_PATTERN.match(text.strip())
        if not match:
            raise ConfigError(f"invalid override '{text}', expected key.path=value")
        try:
            value = yaml.safe_load(match.group(2)) if match.group(2) else None
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid override value in '{text}': {e}")
        return match.group(1).split("."), value

    @classmethod
    def apply_overrides(cls, data: dict, overrides: Sequence[str]) -> dict:
        data = copy.deepcopy(data)
        for text in overrides:
            keys, value = cls.parse_override(text)
            node = data
            for key in keys[:-1]:
                child = node.get(key)
                if child is None:
                    child = node[key] = {}
                if not isinstance(child, dict):
                    raise ConfigError(f"override '{text}': '{key}' is not a block")
                node = child
            node[keys[-1]] = value
        return data
