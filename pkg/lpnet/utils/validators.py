from functools import wraps

from marshmallow import ValidationError

from lpnet.exceptions import UsageError
from lpnet.models.run_config import RunConfigSchema


def validate_run_config(f):
    """Check the command's numeric and scheme arguments before its body runs."""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        schema = RunConfigSchema()
        present = {key: value for key, value in kwargs.items() if key in schema.fields and value is not None}
        try:
            schema.load(present)
        except ValidationError as err:
            problems = '; '.join(f"--{key.replace('_', '-')}: {' '.join(map(str, msgs))}"
                                 for key, msgs in err.messages.items())
            raise UsageError(problems) from err
        return f(*args, **kwargs)
    return decorated_function
