"""
Configuration management
Process-level settings come from the environment (or a .env file);
run-level settings live in the JSON RunConfig, see app/models.py
"""

import os
from dotenv import load_dotenv

from .logger import logger

load_dotenv()

VERSION = "0.4.0"


class Settings:
    """Solver settings"""

    # Worker pool
    MAX_WORKERS: int = int(os.getenv("HDG_WORKERS", "1"))

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # p-adaptivity bounds
    P_MIN: int = int(os.getenv("HDG_P_MIN", "1"))
    P_MAX: int = int(os.getenv("HDG_P_MAX", "6"))

    # Extra quadrature degree on top of 2p + max(1, r)
    QUADRATURE_EXTRA: int = int(os.getenv("HDG_QUADRATURE_EXTRA", "0"))
    QUADRATURE_MAX_DEGREE: int = 40

    # Largest supported Lagrange order on the equispaced lattice
    BASIS_MAX_ORDER: int = 8

    # DataSet entries above which the binary layout is written
    BINARY_THRESHOLD: int = int(os.getenv("HDG_BINARY_THRESHOLD", "200000"))

    # Point location tolerance in barycentric coordinates
    LOCATE_TOLERANCE: float = 1e-10

    def validate_settings(self) -> bool:
        """Validate all settings and return True if valid"""
        issues = []

        if self.MAX_WORKERS < 1:
            issues.append("HDG_WORKERS must be at least 1")

        if self.P_MIN < 0:
            issues.append("HDG_P_MIN must be nonnegative")

        if self.P_MAX < self.P_MIN:
            issues.append("HDG_P_MAX must be >= HDG_P_MIN")

        if self.P_MAX > self.BASIS_MAX_ORDER:
            issues.append(f"HDG_P_MAX above supported basis order {self.BASIS_MAX_ORDER}")

        if 2 * self.P_MAX + 3 + self.QUADRATURE_EXTRA > self.QUADRATURE_MAX_DEGREE:
            issues.append("quadrature degree for HDG_P_MAX exceeds supported maximum")

        if issues:
            logger.warning("Configuration issues:")
            for issue in issues:
                logger.warning(f"   • {issue}")
            return False

        return True

    def get_summary(self) -> dict:
        """Get configuration summary for resolved-config artifacts"""
        return {
            "version": VERSION,
            "max_workers": self.MAX_WORKERS,
            "p_min": self.P_MIN,
            "p_max": self.P_MAX,
            "quadrature_extra": self.QUADRATURE_EXTRA,
            "quadrature_family": "collapsed Gauss-Jacobi",
            "node_family": "equispaced simplex lattice",
            "binary_threshold": self.BINARY_THRESHOLD,
        }


# Global settings instance
settings = Settings()

if not settings.validate_settings():
    logger.warning("Some configuration issues detected. Solver may not work properly.")
