# Routers Package
