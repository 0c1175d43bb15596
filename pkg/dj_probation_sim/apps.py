from django.apps import AppConfig


class DjProbationSimConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "dj_probation_sim"
    verbose_name = "DJ Probation Simulator"
