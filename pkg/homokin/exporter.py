import csv
import io
from io import BytesIO
from typing import Dict, Iterable, List, Sequence

import numpy as np
from openpyxl import Workbook

from homokin.measure import EmpiricalMeasure
from homokin.models import ConvergenceTable, HydroState, Moments, ResidualReport
from homokin.parser import PARTICLE_COLUMNS, STRESS_COLUMNS

MOMENT_COLUMNS = ["t", "rho", "theta", "e"] + STRESS_COLUMNS + ["q1", "q2", "q3"]
_STRESS_INDEX = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return format(float(value), ".17g")


class CsvExporter:
    """所有 CSV 输出使用 .17g 格式，相同配置与种子得到逐字节相同的文件"""

    @classmethod
    def table(cls, header: Sequence[str], rows: Iterable[Sequence]) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
        return buf.getvalue()

    @classmethod
    def moments(cls, series: Sequence[Moments]) -> str:
        rows = []
        for m in series:
            P = m.P
            rows.append([m.t, m.rho, m.theta, m.e] + [P[i][j] for i, j in _STRESS_INDEX] + list(m.q))
        return cls.table(MOMENT_COLUMNS, rows)

    @classmethod
    def hydro(cls, series: Sequence[HydroState]) -> str:
        return cls.table(["t", "rho", "theta"], [[s.t, s.rho, s.theta] for s in series])

    @classmethod
    def residual(cls, report: ResidualReport) -> str:
        return cls.table(["t", "r1", "r3"], zip(report.t, report.r1, report.r3))

    @classmethod
    def particles(cls, x: np.ndarray, w: np.ndarray) -> str:
        return cls.table(PARTICLE_COLUMNS, np.concatenate([x, w], axis=1))

    @classmethod
    def measure(cls, measure: EmpiricalMeasure) -> str:
        rows = np.concatenate([measure.points, measure.weights[:, None]], axis=1)
        return cls.table(PARTICLE_COLUMNS + ["weight"], rows)

    @classmethod
    def trajectory(cls, times: Sequence[float], xs: Sequence[np.ndarray], ws: Sequence[np.ndarray]) -> str:
        rows = []
        for t, x, w in zip(times, xs, ws):
            for i in range(x.shape[0]):
                rows.append([t, i] + list(x[i]) + list(w[i]))
        return cls.table(["t", "i"] + PARTICLE_COLUMNS, rows)

    @classmethod
    def convergence(cls, table: ConvergenceTable) -> str:
        return cls.table(["N", "seed", "t", "W1"], [[r.N, r.seed, r.t, r.W1] for r in table.rows])


class ExcelExporter:
    SHEET_TITLE_LIMIT = 31

    def export(self, files: Dict[str, str]) -> bytes:
        """每个 CSV 一个工作表"""
        wb = Workbook()
        wb.remove(wb.active)
        for name, content in files.items():
            title = name.rsplit(".", 1)[0][: self.SHEET_TITLE_LIMIT] or "sheet"
            ws = wb.create_sheet(title=title)
            for row in csv.reader(io.StringIO(content)):
                ws.append([self._cell(v) for v in row])
            self._fit_columns(ws)
        if not wb.sheetnames:
            wb.create_sheet(title="empty")

        output = BytesIO()
        wb.save(output)
        output.seek(0)
        return output.getvalue()

    @staticmethod
    def _cell(value: str):
        try:
            return float(value)
        except ValueError:
            return value

    @staticmethod
    def _fit_columns(ws) -> None:
        for col in ws.columns:
            column = col[0].column_letter
            max_length = max((len(str(cell.value)) for cell in col if cell.value is not None), default=0)
            ws.column_dimensions[column].width = min(max_length + 2, 50)

    @classmethod
    def csv_files(cls, names: List[str], read) -> Dict[str, str]:
        return {name: read(name).decode("utf-8") for name in names if name.endswith(".csv")}
