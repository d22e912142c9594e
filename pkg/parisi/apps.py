from django.apps import AppConfig


class ParisiConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'parisi'
    verbose_name = 'Parisi PDE'
