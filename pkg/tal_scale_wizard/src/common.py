import zlib
import datetime
import logging
from typing import Any, Dict, List, Optional, Sequence
import numpy as np
import pandas as pd
import torch
from tal_scale_wizard import TalRootDirectory


class GenerationError(ValueError):
    """
    The synthetic configuration cannot produce a dataset.
    """

    def __init__(self, field: str, msg: str) -> None:
        super().__init__(f"{field}: {msg}")
        self.field = field


class StoreFormatError(ValueError):
    """
    An artifact on disk does not follow its declared format.
    """

    def __init__(self, file: str, field: str, msg: str) -> None:
        super().__init__(f"{file} [{field}]: {msg}")
        self.file = file
        self.field = field


class GradientError(ArithmeticError):
    def __init__(self, parameter: str) -> None:
        super().__init__(f"Non-finite gradient for parameter {parameter}")
        self.parameter = parameter


class AdaptationError(ArithmeticError):
    def __init__(self, epoch: int, batch: int, value: float) -> None:
        super().__init__(f"Non-finite adaptation loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class EvaluationError(ValueError):
    pass


def setup_logging(level: Optional[str] = None) -> None:
    """
    Configure the root logger once, level from TAL_LOG_LEVEL unless given.
    """
    if level is None:
        level = TalRootDirectory.env().get("TAL_LOG_LEVEL", "INFO")
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(message)s",
    )


def create_xlsx_file(multi_data: Dict[str, pd.DataFrame], file_path: str) -> bool:
    """
    Create Customize Excel File

    Args:
        multi_data (Dict[str, pd.DataFrame]): key is sheet, value is dataframe
        file_path (str): file path, e.g. /path/to/summary.xlsx
    """
    if not multi_data:
        logging.warning("No data to create file")
        return False
    if not file_path.endswith(".xlsx"):
        file_path = f"{file_path}.xlsx"
    writer = pd.ExcelWriter(file_path, engine="xlsxwriter")
    # pinned so the same tables give the same bytes
    writer.book.set_properties({"created": datetime.datetime(2000, 1, 1)})

    for sheet, data in multi_data.items():
        # Excel caps sheet names at 31 characters
        name = sheet[:31]
        data.to_excel(writer, sheet_name=name, index=False)
        worksheet = writer.sheets[name]
        worksheet.freeze_panes(1, 0)  # Freeze the first row

    writer.close()
    return True


class TalCommon:
    """
    Common utils shared by every stage
    """

    @staticmethod
    def split_list(my_list: List[Any], count: int) -> List[List[Any]]:
        return [my_list[i : i + count] for i in range(0, len(my_list), count)]

    @staticmethod
    def stage_seed(seed: int, *names: str) -> np.random.SeedSequence:
        """
        Named substream of the experiment seed, e.g. stage_seed(7, "train-base").
        """
        entropy = [int(seed)] + [zlib.crc32(name.encode("utf-8")) for name in names]
        return np.random.SeedSequence(entropy)

    @staticmethod
    def stage_rng(seed: int, *names: str) -> np.random.Generator:
        return np.random.default_rng(TalCommon.stage_seed(seed, *names))

    @staticmethod
    def torch_generator(seed: int, *names: str) -> torch.Generator:
        state = TalCommon.stage_seed(seed, *names).generate_state(1, dtype=np.uint64)[0]
        gen = torch.Generator()
        gen.manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)
        return gen

    @staticmethod
    def to_dataframe(records: Sequence[dict], columns: Optional[List[str]] = None) -> pd.DataFrame:
        """
        Convert the given list of records to dataframe, keeping column order when given
        """
        df = pd.DataFrame(list(records))
        if columns is not None:
            df = df.reindex(columns=columns)
        return df

    @staticmethod
    def render_table(df: pd.DataFrame, float_format: str = "{:.4f}") -> str:
        """
        Aligned-column text rendering of a report table
        """
        if df.empty:
            return "(empty)\n"
        formatters = {
            col: float_format.format
            for col in df.columns
            if pd.api.types.is_float_dtype(df[col])
        }
        return df.to_string(index=False, formatters=formatters) + "\n"
