//! SE(3) poses, pinhole projection, pointmaps, motion fields and the
//! interpolation/warping used for sensor synchronization.

mod camera;
mod interp;
mod pose;
mod trajectory;

pub use camera::{
    motion_field, pixel_motion, pointmap_from_depth, project, unproject, DepthMap, FrameTag,
    Intrinsics, MotionField, Pointmap,
};
pub use interp::{interpolate_pose, slerp, warp_depth};
pub use pose::{
    hat, se3_exp, se3_left_jacobian_inv, se3_log, se3_right_jacobian_inv, so3_exp,
    so3_left_jacobian, so3_left_jacobian_inv, so3_log, Mat3, Mat6, Pose, Vec3, Vec6, SMALL_ANGLE,
};
pub use trajectory::Trajectory;
