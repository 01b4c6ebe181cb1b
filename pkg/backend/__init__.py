# Hospital Variance Lab - Backend Package
