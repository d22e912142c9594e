from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(choices=[('phase_scan', 'Phase scan'), ('exact_gap', 'Exact spectral gaps'), ('rate_curve', 'Rate curve'), ('barrier', 'Barrier certificate'), ('mcmc', 'Overlap sampler')], max_length=20)),
                ('config', models.JSONField(default=dict)),
                ('seed', models.IntegerField(default=0)),
                ('threads', models.PositiveIntegerField(default=1)),
                ('output_dir', models.CharField(blank=True, max_length=500)),
                ('status', models.CharField(choices=[('running', 'Running'), ('success', 'Success'), ('config_error', 'Configuration Error'), ('not_converged', 'Numerical Non-convergence'), ('invariant_violation', 'Invariant Violation')], default='running', max_length=20)),
                ('exit_code', models.IntegerField(blank=True, null=True)),
                ('message', models.TextField(blank=True)),
                ('code_version', models.CharField(blank=True, max_length=20)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-started_at'],
            },
        ),
    ]
