from rest_framework import serializers

from cloud.models import SENSOR_PRESETS
from synth.models import CLASS_NAMES


class StrictSerializer(serializers.Serializer):
    """Сериализатор, отвергающий неизвестные ключи."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = set(data) - set(self.fields)
            if unknown:
                raise serializers.ValidationError({key: "Неизвестный ключ." for key in sorted(unknown)})
        return super().to_internal_value(data)


def vector(size, **kwargs):
    return serializers.ListField(child=serializers.FloatField(), min_length=size, max_length=size, **kwargs)


class FloorSerializer(StrictSerializer):
    height = serializers.FloatField(default=-1.7)
    # номера ячеек земли укладываются в 24 бита при стороне до 800 м
    extent = serializers.FloatField(min_value=0.0, max_value=400.0, default=50.0)


class SceneObjectSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=["block", "pillar"])
    scene_class = serializers.ChoiceField(choices=sorted(CLASS_NAMES.values()))
    name = serializers.CharField(required=False, allow_blank=True)
    center = vector(3, help_text="Центр бокса; для столба (x, y, z основания)")
    size = vector(3, required=False, help_text="Длина, ширина, высота бокса, м")
    heading_deg = serializers.FloatField(default=0.0)
    radius = serializers.FloatField(min_value=0.0, required=False)
    height = serializers.FloatField(min_value=0.0, required=False)
    velocity = vector(3, default=[0.0, 0.0, 0.0], help_text="Скорость, м/кадр")

    def validate(self, attrs):
        if attrs["kind"] == "block" and "size" not in attrs:
            raise serializers.ValidationError("Для бокса нужен размер size.")
        if attrs["kind"] == "pillar" and ("radius" not in attrs or "height" not in attrs):
            raise serializers.ValidationError("Для столба нужны radius и height.")
        return attrs


class SceneSpecSerializer(StrictSerializer):
    """YAML-описание сцены симулятора."""

    floor = FloorSerializer(required=False, allow_null=True)
    objects = SceneObjectSerializer(many=True, required=False)
    ego_step = vector(3, default=[0.3, 0.0, 0.0], help_text="Перенос эго за кадр, м")
    ego_yaw_step_deg = serializers.FloatField(default=0.0)
    sensor = serializers.ChoiceField(choices=sorted(SENSOR_PRESETS), default="synthetic")
    noise_sigma = serializers.FloatField(min_value=0.0, default=0.01)
    max_range = serializers.FloatField(min_value=0.0, default=60.0)
