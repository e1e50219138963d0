from typing import Iterable, Sequence


class ValidationError(Exception):
    """Custom validation error"""
    pass


class ShapeError(ValidationError):
    """Operand shapes are incompatible with a primitive or operation"""
    pass


class DomainError(ValidationError):
    """Input lies outside a primitive's documented domain"""
    pass


class GuardError(ValidationError):
    """Velocity too large for the requested scaling-and-squaring depth"""
    pass


class DegenerateBatchError(ValidationError):
    """No anchor in a contrastive batch has a positive partner"""
    pass


class IntegrityError(ValidationError):
    """Stored artifact is truncated, corrupted or of the wrong version"""
    pass


class UsageError(ValidationError):
    """Command-line usage error"""
    pass


MIN_GRID = 4
STEPS_RANGE = (4, 10)
NOISE_SCALE_RANGE = (0.0, 0.05)


def validate_grid(height: int, width: int) -> None:
    """Validate grid dimensions"""
    if height < MIN_GRID or width < MIN_GRID:
        raise ShapeError(f"grid {height}x{width} is smaller than {MIN_GRID}x{MIN_GRID}")


def validate_steps(steps: int) -> None:
    """Validate scaling-and-squaring depth"""
    low, high = STEPS_RANGE
    if not low <= steps <= high:
        raise ValidationError(f"steps={steps} outside [{low}, {high}]")


def validate_noise_scale(scale: float) -> None:
    """Validate a universal-noise scale"""
    low, high = NOISE_SCALE_RANGE
    if not low <= scale <= high:
        raise ValidationError(f"noise scale {scale} outside [{low}, {high}]")


def validate_labels(labels: Iterable[int], num_classes: int) -> None:
    """Validate class ids against the class count"""
    for label in labels:
        if not 0 <= int(label) < num_classes:
            raise ValidationError(f"label {label} out of range for {num_classes} classes")


def validate_same_shape(kind: str, shapes: Sequence[tuple]) -> None:
    """Require identical operand shapes for elementwise primitives"""
    first = tuple(shapes[0])
    for other in shapes[1:]:
        if tuple(other) != first:
            raise ShapeError(f"{kind}: shape mismatch {first} vs {tuple(other)}")
