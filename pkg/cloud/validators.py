import numpy as np
from django.core.exceptions import ValidationError


class FiniteCoordinatesValidator:
    def __init__(self, field):
        self.field = field

    def __call__(self, value):
        if not np.isfinite(value).all():
            raise ValidationError(f"Поле '{self.field}' содержит нечисловые или бесконечные координаты.")


class SameLengthValidator:
    def __init__(self, field1, field2):
        self.field1 = field1
        self.field2 = field2

    def __call__(self, first, second):
        if len(first) != len(second):
            raise ValidationError(
                f"Длины '{self.field1}' ({len(first)}) и '{self.field2}' ({len(second)}) не совпадают."
            )


class RotationMatrixValidator:
    """Проверяет ортонормированность и det = +1."""

    def __init__(self, tolerance=1e-9):
        self.tolerance = tolerance

    def __call__(self, value):
        value = np.asarray(value)
        if value.shape != (3, 3):
            raise ValidationError("Матрица поворота должна иметь размер 3x3.")
        if not np.allclose(value.T @ value, np.eye(3), atol=self.tolerance, rtol=0.0):
            raise ValidationError("Матрица поворота не ортонормирована.")
        if abs(np.linalg.det(value) - 1.0) > self.tolerance:
            raise ValidationError("Определитель матрицы поворота должен быть равен +1.")


class FovValidator:
    def __call__(self, f_up, f_down):
        if f_up < 0:
            raise ValidationError("f_up должен быть неотрицательным.")
        if f_down <= 0:
            raise ValidationError("f_down должен быть положительным.")


class NonNegativeValidator:
    def __init__(self, field):
        self.field = field

    def __call__(self, value):
        if value < 0:
            raise ValidationError(f"Поле '{self.field}' не может быть отрицательным.")
