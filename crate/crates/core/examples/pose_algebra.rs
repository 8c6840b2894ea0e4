//! Rigid-body poses: composition, inversion, relative poses and the
//! 7-vector differences the policies consume.

use hilearn::geometry::{apply_delta, pose_delta, relative_pose, Pose};
use hilearn::trajectory::Observation;

fn main() {
    let table = Pose::from_xyz_yaw([0.4, 0.0, 0.0], 0.0);
    let block = Pose::from_xyz_yaw([0.45, 0.1, 0.02], 0.5);
    let gripper = Pose::from_axis_angle([0.45, 0.1, 0.12], [1.0, 0.0, 0.0], std::f64::consts::PI).unwrap();

    // gripper expressed in the block's frame, and back again
    let rel = relative_pose(&block, &gripper);
    let back = block.compose(&rel);
    println!("gripper in block frame: {rel:?}");
    println!("round trip error: {:.2e}", back.max_abs_diff(&gripper));

    let inv = block.inverse();
    println!("block * block^-1 is identity: {}", block.compose(&inv).approx_eq(&Pose::identity(), 1e-12));

    // the 7-vector difference and its inverse operation
    let d = pose_delta(&gripper.to_vec7(), &table.to_vec7());
    let again = apply_delta(&table, &d).unwrap();
    println!("delta gripper - table = {:?}", d.as_slice());
    println!("table + delta matches gripper: {}", again.approx_eq(&gripper, 1e-9));

    // an observation stores every pairwise relative pose
    let obs = Observation::from_world(0.0, &[gripper, block, table]);
    println!("p[effector][block] == relative_pose(block, gripper): {}", obs.rel(0, 1).approx_eq(&rel, 1e-12));
    println!("p[block][block] is identity: {}", obs.rel(1, 1).approx_eq(&Pose::identity(), 1e-12));
}
