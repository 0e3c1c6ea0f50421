"""
Setup script for the florence2_ros2 ament_python package.
Build with: colcon build --packages-select florence2_interfaces florence2_ros2
"""

from glob import glob

from setuptools import setup

PACKAGE = 'florence2_ros2'

DATA_FILES = [
    ('share/ament_index/resource_index/packages', ['resource/' + PACKAGE]),
    ('share/' + PACKAGE, ['package.xml']),
    ('share/' + PACKAGE + '/config', glob('config/*.yaml')),
    ('share/' + PACKAGE + '/launch', glob('launch/*.launch.py')),
]

setup(
    name=PACKAGE,
    version='0.9.0',
    packages=[PACKAGE],
    data_files=DATA_FILES,
    install_requires=['setuptools'],
    zip_safe=True,
    description='Florence-2 vision-language node for ROS 2',
    license='MIT',
    tests_require=['pytest'],
    entry_points={
        'console_scripts': [
            'florence2_node = florence2_ros2.ros2_adapter:main',
            'florence2_client = florence2_ros2.clients:main',
            'florence2_bench = florence2_ros2.bench:main',
            'florence2_smoke = florence2_ros2.deploy:main',
        ],
    },
)
