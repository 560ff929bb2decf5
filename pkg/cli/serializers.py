from django.conf import settings
from rest_framework import serializers
from rest_framework.fields import empty

from cascade.models import GROUPINGS, VARIANTS
from cloud.models import SENSOR_PRESETS
from correspond.models import DEFAULT_INTERVALS
from learn.models import MODES
from synth.serializers import StrictSerializer


class ConfigSection(StrictSerializer):
    """Раздел конфигурации: отсутствующий раздел заполняется значениями по умолчанию."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("required", False)
        super().__init__(*args, **kwargs)

    def validate_empty_values(self, data):
        if data is empty or data is None:
            data = {}
        return super().validate_empty_values(data)


def pair(default, help_text):
    return serializers.ListField(
        child=serializers.FloatField(min_value=0.0), min_length=2, max_length=2,
        default=list(default), help_text=help_text,
    )


class DatasetSection(ConfigSection):
    sensor = serializers.ChoiceField(
        choices=sorted(SENSOR_PRESETS), default="synthetic",
        help_text="Пресет сенсора для range-view проекции (H, W, вертикальный угол обзора)",
    )
    labels = serializers.ChoiceField(
        choices=sorted(GROUPINGS), default="synthetic",
        help_text="Схема истинных меток в labels/: классы симулятора или номера SemanticKITTI",
    )
    ignore = serializers.ListField(
        child=serializers.IntegerField(min_value=0), default=[0],
        help_text="Истинные классы, не участвующие в оценке",
    )


class SynthSection(ConfigSection):
    scene = serializers.CharField(
        default="demo",
        help_text="demo, intersection, random или путь к YAML-описанию сцены",
    )
    frames = serializers.IntegerField(min_value=2, default=20, help_text="Число кадров последовательности")
    noise_sigma = serializers.FloatField(
        min_value=0.0, default=0.01, help_text="СКО гауссова шума дальности, м (для demo/intersection/random)",
    )


class GroundSection(ConfigSection):
    height_gate = serializers.FloatField(
        min_value=0.0, default=0.5, help_text="Кандидаты в землю: не выше нижнего перцентиля высоты плюс порог, м",
    )
    ground_dist_thresh = serializers.FloatField(
        min_value=0.0, default=0.2, help_text="Точка принадлежит земле, если ближе к плоскости, м",
    )
    iterations = serializers.IntegerField(min_value=1, default=100, help_text="Итерации RANSAC")
    max_normal_angle_deg = serializers.FloatField(
        min_value=0.0, max_value=90.0, default=30.0, help_text="Допустимый наклон нормали плоскости к вертикали",
    )


class SorSection(ConfigSection):
    k = serializers.IntegerField(min_value=1, default=8, help_text="Соседей в статистическом фильтре выбросов")
    stddev_mult = serializers.FloatField(min_value=0.0, default=1.0, help_text="Порог: среднее + mult · СКО")


class IcpSection(ConfigSection):
    max_corr_dist = serializers.FloatField(
        min_value=0.0, default=1.0, help_text="Пары ICP дальше этого расстояния отбрасываются, м",
    )
    tol = serializers.FloatField(min_value=0.0, default=1e-4, help_text="Останов по изменению среднего остатка")
    max_iter = serializers.IntegerField(min_value=1, default=50, help_text="Максимум итераций ICP")


class PreprocessSection(ConfigSection):
    ground = GroundSection()
    sor = SorSection()
    icp = IcpSection()
    min_points = serializers.IntegerField(
        min_value=1, default=10, help_text="Кадр с меньшим числом точек после фильтрации исключается",
    )


class DynamicsSection(ConfigSection):
    lam = serializers.FloatField(min_value=0.0, default=1.0, help_text="λ в score = 1 - exp(-λ·d)")
    epsilon = serializers.FloatField(
        min_value=0.0, max_value=1.0, default=0.5, help_text="Порог оценки подвижности",
    )
    window = serializers.IntegerField(min_value=1, default=3, help_text="Окно M опорных кадров с каждой стороны")
    eps = serializers.FloatField(min_value=0.0, default=0.8, help_text="Радиус DBSCAN, м")
    min_pts = serializers.IntegerField(min_value=1, default=10, help_text="Минимум соседей ядровой точки DBSCAN")
    score_scale = serializers.FloatField(
        min_value=0.0, default=2.0, help_text="Вес оценки подвижности в признаке DBSCAN",
    )
    n_min = serializers.IntegerField(min_value=0, default=20, help_text="Минимум точек в боксе")
    max_side = serializers.FloatField(min_value=0.0, default=15.0, help_text="Максимальная сторона бокса, м")
    min_volume = serializers.FloatField(min_value=0.0, default=0.1, help_text="Минимальный объём бокса, м³")
    max_volume = serializers.FloatField(min_value=0.0, default=120.0, help_text="Максимальный объём бокса, м³")


class TrackingSection(ConfigSection):
    weights = serializers.ListField(
        child=serializers.FloatField(min_value=0.0), min_length=3, max_length=3, default=[0.5, 0.3, 0.2],
        help_text="Веса слагаемых стоимости: расстояние, перекрытие, размер",
    )
    d_norm = serializers.FloatField(min_value=0.0, default=5.0, help_text="Нормировка расстояния центров, м")
    gate_dist = serializers.FloatField(min_value=0.0, default=8.0, help_text="Пары дальше порога не связываются, м")
    max_misses = serializers.IntegerField(min_value=0, default=3, help_text="Кадров без наблюдения до закрытия трека")


class CorrespondSection(ConfigSection):
    static_max_dist = serializers.FloatField(
        min_value=0.0, default=0.3, help_text="Порог статической пары после выравнивания, м",
    )
    dynamic_max_dist = serializers.FloatField(
        min_value=0.0, default=0.5, help_text="Порог динамической пары после ICP по объекту, м",
    )
    min_coverage = serializers.FloatField(
        min_value=0.0, max_value=1.0, default=0.2,
        help_text="Пара кадров с меньшим покрытием помечается некачественной",
    )
    intervals = serializers.ListField(
        child=serializers.IntegerField(min_value=1), min_length=1, default=list(DEFAULT_INTERVALS),
        help_text="Набор интервалов k между кадрами пары",
    )
    icp = IcpSection()


class AugmentSection(ConfigSection):
    translate = serializers.BooleanField(default=True, help_text="Случайный сдвиг по x и y")
    max_translation = serializers.FloatField(min_value=0.0, default=2.0, help_text="Максимальный сдвиг, м")
    flip = serializers.BooleanField(default=True, help_text="Случайное отражение y -> -y")
    rotate = serializers.BooleanField(default=True, help_text="Случайный поворот вокруг вертикали")
    downsample = serializers.BooleanField(default=True, help_text="Случайное прореживание точек")
    keep_ratio = serializers.FloatField(
        min_value=0.0, max_value=1.0, default=0.9, help_text="Доля точек, остающихся после прореживания",
    )


class KMeansSection(ConfigSection):
    iters = serializers.IntegerField(min_value=1, default=20, help_text="Итерации мини-пакетного K-means")
    batch_size = serializers.IntegerField(min_value=1, default=4096, help_text="Размер мини-пакета")
    n_init = serializers.IntegerField(min_value=1, default=1, help_text="Число перезапусков k-means++")
    full_batch = serializers.BooleanField(default=False, help_text="Полные итерации Ллойда вместо мини-пакетов")


class LearnSection(ConfigSection):
    mode = serializers.ChoiceField(
        choices=list(MODES), default="st+dloss", help_text="Режим обучения: baseline, ego, st, st+dloss",
    )
    epochs = serializers.IntegerField(min_value=1, default=10, help_text="Эпохи чередования кластеризации и обучения")
    samples = serializers.IntegerField(min_value=1, default=24, help_text="Обучающих пар видов на прогон")
    batch_size = serializers.IntegerField(min_value=1, default=12, help_text="Пар в шаге оптимизатора")
    lr = serializers.FloatField(min_value=0.0, default=0.05, help_text="Начальный шаг Adam")
    decay_at = serializers.FloatField(
        min_value=0.0, max_value=1.0, default=0.4, help_text="Доля эпох, после которой шаг умножается на decay_factor",
    )
    decay_factor = serializers.FloatField(min_value=0.0, default=0.1, help_text="Множитель ступенчатого затухания")
    k = serializers.IntegerField(min_value=2, default=4, help_text="Число кластеров K")
    channels = serializers.IntegerField(min_value=1, default=32, help_text="Размерность признака пикселя")
    hidden = serializers.IntegerField(min_value=1, default=16, help_text="Каналы скрытого свёрточного слоя")
    temperature = serializers.FloatField(min_value=0.0, default=1.0, help_text="Температура прототипной CE")
    alpha = serializers.FloatField(min_value=0.0, default=1.0, help_text="Вес E_within")
    beta = serializers.FloatField(min_value=0.0, default=1.0, help_text="Вес E_cross")
    gamma_w = serializers.FloatField(min_value=0.0, default=1.0, help_text="Вес дискриминативной потери")
    delta_v = serializers.FloatField(min_value=0.0, default=0.5, help_text="Отступ притяжения δ_v")
    delta_d = serializers.FloatField(min_value=0.0, default=1.5, help_text="Отступ отталкивания δ_d")
    v_split = serializers.FloatField(
        min_value=0.0, default=3.0, help_text="Граница объёма между малыми и большими объектами, м³",
    )
    augment = AugmentSection()
    kmeans = KMeansSection()


class CascadeSection(ConfigSection):
    variant = serializers.ChoiceField(
        choices=list(VARIANTS), default="heuristic", help_text="single-shot, dynamic или heuristic",
    )
    mode = serializers.ChoiceField(
        choices=list(MODES), default="st", help_text="Режим второго этапа (кластеризация переднего плана)",
    )
    car_length = pair((2.5, 6.0), "Допустимая длина стоящей машины, м")
    car_width = pair((1.2, 2.5), "Допустимая ширина стоящей машины, м")
    car_height = pair((1.0, 2.2), "Допустимая высота стоящей машины, м")
    ground_gap = serializers.FloatField(
        min_value=0.0, default=0.3, help_text="Низ бокса стоящей машины не дальше от земли, м",
    )
    static_eps = serializers.FloatField(min_value=0.0, default=0.5, help_text="Радиус DBSCAN статических точек, м")
    static_min_pts = serializers.IntegerField(min_value=1, default=10, help_text="Минимум соседей DBSCAN")
    threshold = serializers.FloatField(
        min_value=0.0, max_value=1.0, default=0.5, help_text="Выход сигмоиды не ниже порога -> передний план",
    )
    epochs = serializers.IntegerField(min_value=1, default=10, help_text="Эпохи модели фон/передний план")
    samples = serializers.IntegerField(min_value=1, default=16, help_text="Обучающих видов модели фон/передний план")
    batch_size = serializers.IntegerField(min_value=1, default=8, help_text="Видов в шаге оптимизатора")
    lr = serializers.FloatField(min_value=0.0, default=0.01, help_text="Начальный шаг Adam")
    decay_at = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.4, help_text="Доля эпох до затухания")
    decay_factor = serializers.FloatField(min_value=0.0, default=0.1, help_text="Множитель затухания")
    hidden = serializers.IntegerField(min_value=1, default=16, help_text="Каналы скрытого слоя")

    def validate(self, attrs):
        for name in ("car_length", "car_width", "car_height"):
            low, high = attrs[name]
            if low > high:
                raise serializers.ValidationError({name: "Нижняя граница больше верхней."})
        return attrs


class PipelineConfigSerializer(StrictSerializer):
    """Конфигурация пайплайна: по разделу на модуль, сид и число потоков."""

    seed = serializers.IntegerField(
        min_value=0, default=lambda: settings.PIPELINE_SEED, help_text="Сид всех случайных процессов",
    )
    threads = serializers.IntegerField(
        min_value=1, default=lambda: settings.PIPELINE_THREADS, help_text="Потоки для обработки кадров",
    )
    dataset = DatasetSection()
    synth = SynthSection()
    preprocess = PreprocessSection()
    dynamics = DynamicsSection()
    tracking = TrackingSection()
    correspond = CorrespondSection()
    learn = LearnSection()
    cascade = CascadeSection()
