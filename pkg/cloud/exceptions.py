class PipelineError(Exception):
    """Базовая ошибка пайплайна автолейблинга и обучения."""

    code = "pipeline_error"


class MalformedFileError(PipelineError):
    """Файл .bin / .label / кэша повреждён или имеет неверный размер."""

    code = "malformed_file"


class LabelMismatchError(PipelineError):
    """Метки не согласуются с облаком или матрицей ошибок: не то число или не тот диапазон."""

    code = "label_mismatch"


class ConfigurationError(PipelineError):
    """Недопустимые параметры конфигурации."""

    code = "configuration"


class EmptyInputError(PipelineError):
    """Пустой вход там, где операция требует данных."""

    code = "empty_input"


class ShapeMismatchError(PipelineError):
    """Размеры изображения или тензора не совпадают с ожидаемыми."""

    code = "shape_mismatch"


class TrainingDivergedError(PipelineError):
    """Функция потерь стала NaN/inf во время обучения."""

    code = "training_diverged"


class MissingStageError(PipelineError):
    """Не найден кэш предыдущей стадии."""

    code = "missing_stage"

    def __init__(self, stage, path):
        self.stage = stage
        self.path = path
        super().__init__(
            f"Не найден кэш стадии '{stage}' ({path}). Сначала выполните: python manage.py {stage}"
        )
