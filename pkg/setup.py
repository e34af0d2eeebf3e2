from setuptools import setup, find_packages
setup(
    name="jala-desk",
    packages=find_packages(include=["jala*"]),
    package_data={"jala": ["configs/*.json"]},
)
