from django.apps import AppConfig


class SphericalConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'spherical'
    verbose_name = 'Spherical statics'
