from rest_framework import serializers


class PointCountsSerializer(serializers.Serializer):
    total = serializers.IntegerField(min_value=0)
    per_class = serializers.DictField(child=serializers.IntegerField(min_value=0))


class MetricsReportSerializer(serializers.Serializer):
    """Отчёт стадии eval (report.json)."""

    miou = serializers.FloatField(min_value=0.0, max_value=1.0)
    per_class_iou = serializers.DictField(
        child=serializers.FloatField(min_value=0.0, max_value=1.0, allow_null=True)
    )
    mapping = serializers.DictField(child=serializers.IntegerField(min_value=0))
    point_counts = PointCountsSerializer()
    stage = serializers.CharField(required=False)
    mode = serializers.CharField(required=False)
