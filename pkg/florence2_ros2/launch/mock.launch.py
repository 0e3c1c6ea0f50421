"""
Mock backend with a fixed latency, for CI, the smoke test and bench calibration.

    ros2 launch florence2_ros2 mock.launch.py continuous_task:="<OD>" mock_latency_s:=0.1
"""

import os

from ament_index_python.packages import get_package_share_directory
from launch import LaunchDescription
from launch.actions import DeclareLaunchArgument
from launch.substitutions import LaunchConfiguration
from launch_ros.actions import Node
from launch_ros.parameter_descriptions import ParameterValue


def generate_launch_description():
    params_file = os.path.join(get_package_share_directory('florence2_ros2'), 'config', 'params.yaml')
    return LaunchDescription([
        DeclareLaunchArgument('continuous_task', default_value=''),
        DeclareLaunchArgument('mock_latency_s', default_value='0.1'),
        Node(
            package='florence2_ros2',
            executable='florence2_node',
            name='florence2_node',
            output='screen',
            parameters=[params_file, {
                'model': 'mock',
                'device': 'cpu',
                'continuous_task': ParameterValue(LaunchConfiguration('continuous_task'), value_type=str),
                'mock_latency_s': ParameterValue(LaunchConfiguration('mock_latency_s'), value_type=float),
            }],
        ),
    ])
