import numpy as np
from django.core.exceptions import ValidationError


class ScoreRangeValidator:
    """Все оценки должны лежать в [0, 1)."""

    def __call__(self, scores):
        scores = np.asarray(scores)
        if len(scores) and (scores.min() < 0 or scores.max() >= 1):
            raise ValidationError("Динамическая оценка должна лежать в полуинтервале [0, 1).")


class BoxExtentsValidator:
    def __call__(self, length, width, height):
        if min(length, width, height) < 0:
            raise ValidationError("Размеры бокса не могут быть отрицательными.")
        if length < width:
            raise ValidationError("Длина бокса должна быть не меньше ширины.")


class ThresholdValidator:
    def __init__(self, field):
        self.field = field

    def __call__(self, value):
        if not 0 <= value < 1:
            raise ValidationError(f"Порог '{self.field}' должен лежать в [0, 1).")
