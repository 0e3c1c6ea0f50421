"""
Continuous mode: object detection on every frame of the camera stream.

    ros2 launch florence2_ros2 continuous_od.launch.py image_topic:=/my_camera/image
"""

import os

from ament_index_python.packages import get_package_share_directory
from launch import LaunchDescription
from launch.actions import DeclareLaunchArgument, IncludeLaunchDescription
from launch.launch_description_sources import PythonLaunchDescriptionSource
from launch.substitutions import LaunchConfiguration


def generate_launch_description():
    main_launch = os.path.join(get_package_share_directory('florence2_ros2'), 'launch', 'florence2.launch.py')
    return LaunchDescription([
        DeclareLaunchArgument('image_topic', default_value='/camera/image_raw'),
        DeclareLaunchArgument('model', default_value='microsoft/Florence-2-base'),
        IncludeLaunchDescription(
            PythonLaunchDescriptionSource(main_launch),
            launch_arguments={
                'continuous_task': '<OD>',
                'image_topic': LaunchConfiguration('image_topic'),
                'model': LaunchConfiguration('model'),
                'publish_annotated': 'true',
            }.items(),
        ),
    ])
