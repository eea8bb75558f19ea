# Open-vocabulary sound event detection (desk scale)
