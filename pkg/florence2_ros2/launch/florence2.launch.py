"""
Florence-2 node with the shared parameter file plus command-line overrides.

    ros2 launch florence2_ros2 florence2.launch.py continuous_task:="<OD>" device:=gpu
"""

import os

from ament_index_python.packages import get_package_share_directory
from launch import LaunchDescription
from launch.actions import DeclareLaunchArgument
from launch.substitutions import LaunchConfiguration
from launch_ros.actions import Node
from launch_ros.parameter_descriptions import ParameterValue

ARGUMENTS = [
    ('image_topic', '/camera/image_raw', 'Source image stream', str),
    ('model', 'microsoft/Florence-2-base', 'Model id, local path, or "mock"', str),
    ('continuous_task', '', 'Task token run on every frame; empty for on-demand only', str),
    ('device', 'auto', 'auto, cpu, gpu or gpu:N', str),
    ('precision', 'auto', 'auto, full or reduced', str),
    ('publish_annotated', 'true', 'Publish ~/annotated_image for detection tasks', bool),
]


def generate_launch_description():
    params_file = os.path.join(get_package_share_directory('florence2_ros2'), 'config', 'params.yaml')

    launch_args = [
        DeclareLaunchArgument(name, default_value=default, description=description)
        for name, default, description, _ in ARGUMENTS
    ]
    launch_args.append(DeclareLaunchArgument(
        'params_file', default_value=params_file, description='Full parameter file'))

    overrides = {
        name: ParameterValue(LaunchConfiguration(name), value_type=value_type)
        for name, _, _, value_type in ARGUMENTS
    }

    node = Node(
        package='florence2_ros2',
        executable='florence2_node',
        name='florence2_node',
        output='screen',
        parameters=[LaunchConfiguration('params_file'), overrides],
    )

    return LaunchDescription(launch_args + [node])
