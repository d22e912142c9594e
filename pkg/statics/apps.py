from django.apps import AppConfig


class StaticsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'statics'
    verbose_name = 'Ising statics'
