//! Recorded-sequence ingestion: IMU, feature-track and ground-truth CSVs
//! plus a key-value calibration document.
//!
//! File formats (headers written on export, tolerated on import):
//!   imu.csv          t_ns,wx,wy,wz,ax,ay,az
//!   tracks.csv       t_ns,fid,u,v
//!   groundtruth.csv  t_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz
//!   calib.txt        `key = values` lines; every physical key carries an
//!                    explicit unit suffix and unsuffixed variants are
//!                    rejected rather than guessed.

use crate::error::DatasetError;
use crate::geom::{Quat, V3};
use crate::imu::{ImuSample, NoiseSpec};
use crate::sim::{FrameObs, SimData, TruthSample};
use crate::vision::{CameraModel, DistortionKind};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct SequenceSummary {
    pub duration_s: f64,
    pub imu_rate_hz: f64,
    pub cam_rate_hz: f64,
    pub imu_dropouts: usize,
    pub n_frames: usize,
    pub n_tracks: usize,
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<FrameObs>,
    pub truth: Option<Vec<TruthSample>>,
    pub cam: CameraModel<f64>,
    pub noise: NoiseSpec,
    pub gravity_mag: f64,
    pub summary: SequenceSummary,
}

fn parse_f64(file: &str, line: usize, field: &str) -> Result<f64, DatasetError> {
    field.trim().parse::<f64>().map_err(|_| DatasetError::MalformedRow {
        file: file.into(),
        line,
        msg: format!("not a number: '{field}'"),
    })
}

fn parse_i64(file: &str, line: usize, field: &str) -> Result<i64, DatasetError> {
    field.trim().parse::<i64>().map_err(|_| DatasetError::MalformedRow {
        file: file.into(),
        line,
        msg: format!("not an integer: '{field}'"),
    })
}

fn read_rows(path: &Path, cols: usize) -> Result<Vec<(usize, Vec<String>)>, DatasetError> {
    let name = path.display().to_string();
    let content = std::fs::read_to_string(path)
        .map_err(|_| DatasetError::MissingFile(name.clone()))?;
    let mut out = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        // skip a header row
        if i == 0 && line.chars().next().map(|c| c.is_ascii_alphabetic()).unwrap_or(false) {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if fields.len() != cols {
            return Err(DatasetError::MalformedRow {
                file: name,
                line: line_no,
                msg: format!("expected {cols} fields, found {}", fields.len()),
            });
        }
        out.push((line_no, fields));
    }
    Ok(out)
}

pub fn load_imu_csv(path: &Path) -> Result<Vec<ImuSample>, DatasetError> {
    let name = path.display().to_string();
    let rows = read_rows(path, 7)?;
    let mut out = Vec::with_capacity(rows.len());
    let mut last_t = i64::MIN;
    for (line, f) in rows {
        let t_ns = parse_i64(&name, line, &f[0])?;
        if t_ns <= last_t {
            return Err(DatasetError::MalformedRow {
                file: name,
                line,
                msg: format!("non-monotonic timestamp {t_ns}"),
            });
        }
        last_t = t_ns;
        out.push(ImuSample {
            t: t_ns as f64 * 1e-9,
            gyro: V3::of(
                parse_f64(&name, line, &f[1])?,
                parse_f64(&name, line, &f[2])?,
                parse_f64(&name, line, &f[3])?,
            ),
            accel: V3::of(
                parse_f64(&name, line, &f[4])?,
                parse_f64(&name, line, &f[5])?,
                parse_f64(&name, line, &f[6])?,
            ),
        });
    }
    Ok(out)
}

pub fn load_tracks_csv(path: &Path) -> Result<Vec<FrameObs>, DatasetError> {
    let name = path.display().to_string();
    let rows = read_rows(path, 4)?;
    let mut frames: BTreeMap<i64, Vec<(u64, f64, f64)>> = BTreeMap::new();
    let mut seen: std::collections::BTreeSet<(i64, u64)> = Default::default();
    for (line, f) in rows {
        let t_ns = parse_i64(&name, line, &f[0])?;
        let fid = parse_i64(&name, line, &f[1])? as u64;
        if !seen.insert((t_ns, fid)) {
            return Err(DatasetError::MalformedRow {
                file: name,
                line,
                msg: format!("duplicate (timestamp, feature) pair ({t_ns}, {fid})"),
            });
        }
        let u = parse_f64(&name, line, &f[2])?;
        let v = parse_f64(&name, line, &f[3])?;
        frames.entry(t_ns).or_default().push((fid, u, v));
    }
    Ok(frames
        .into_iter()
        .map(|(t_ns, mut obs)| {
            obs.sort_by_key(|o| o.0);
            FrameObs { t_ns, obs }
        })
        .collect())
}

pub fn load_groundtruth_csv(path: &Path) -> Result<Vec<TruthSample>, DatasetError> {
    let name = path.display().to_string();
    let rows = read_rows(path, 11)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, f) in rows {
        let t_ns = parse_i64(&name, line, &f[0])?;
        let num =
            |i: usize| -> Result<f64, DatasetError> { parse_f64(&name, line, &f[i]) };
        out.push(TruthSample {
            t_ns,
            p: V3::of(num(1)?, num(2)?, num(3)?),
            q: Quat([num(5)?, num(6)?, num(7)?, num(4)?]).normalized(),
            v: V3::of(num(8)?, num(9)?, num(10)?),
            bg: V3::zero(),
            ba: V3::zero(),
        });
    }
    Ok(out)
}

/// Known calibration keys; anything else that *looks* like one of these
/// without its unit suffix is rejected as ambiguous.
const CALIB_KEYS: &[&str] = &[
    "cam.focal_px",
    "cam.center_px",
    "cam.distortion_model",
    "cam.distortion_coeffs",
    "cam.resolution_px",
    "cam.time_offset_s",
    "extrinsics.rot_imu_to_cam_quat_xyzw",
    "extrinsics.p_imu_in_cam_m",
    "imu.gyro_noise_rad_per_s_per_sqrthz",
    "imu.gyro_walk_rad_per_s2_per_sqrthz",
    "imu.accel_noise_m_per_s2_per_sqrthz",
    "imu.accel_walk_m_per_s3_per_sqrthz",
    "gravity_m_per_s2",
];

pub fn load_calibration(path: &Path) -> Result<(CameraModel<f64>, NoiseSpec, f64), DatasetError> {
    let name = path.display().to_string();
    let content =
        std::fs::read_to_string(path).map_err(|_| DatasetError::MissingFile(name.clone()))?;
    let mut kv: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DatasetError::MalformedRow {
            file: name.clone(),
            line: i + 1,
            msg: "expected 'key = values'".into(),
        })?;
        let key = k.trim().to_string();
        if !CALIB_KEYS.contains(&key.as_str()) {
            // a known key missing its unit suffix is an error, not a guess
            if CALIB_KEYS.iter().any(|full| full.starts_with(&key)) {
                return Err(DatasetError::UnitsAmbiguous { file: name, key });
            }
            return Err(DatasetError::MalformedRow {
                file: name,
                line: i + 1,
                msg: format!("unknown key '{key}'"),
            });
        }
        kv.insert(key, v.trim().split_whitespace().map(|s| s.to_string()).collect());
    }
    let get = |key: &str| -> Result<&Vec<String>, DatasetError> {
        kv.get(key).ok_or_else(|| DatasetError::MalformedRow {
            file: name.clone(),
            line: 0,
            msg: format!("missing key '{key}'"),
        })
    };
    let nums = |key: &str, n: usize| -> Result<Vec<f64>, DatasetError> {
        let v = get(key)?;
        if v.len() != n {
            return Err(DatasetError::MalformedRow {
                file: name.clone(),
                line: 0,
                msg: format!("key '{key}' expects {n} values"),
            });
        }
        v.iter().map(|s| parse_f64(&name, 0, s)).collect()
    };
    let focal = nums("cam.focal_px", 2)?;
    let center = nums("cam.center_px", 2)?;
    let model = get("cam.distortion_model")?[0].clone();
    let coeffs = nums("cam.distortion_coeffs", 4)?;
    let res = nums("cam.resolution_px", 2)?;
    let t_off = nums("cam.time_offset_s", 1)?[0];
    let q = nums("extrinsics.rot_imu_to_cam_quat_xyzw", 4)?;
    let p = nums("extrinsics.p_imu_in_cam_m", 3)?;
    let kind = match model.as_str() {
        "radtan" => DistortionKind::RadTan,
        "equidistant" => DistortionKind::Equidistant,
        other => {
            return Err(DatasetError::MalformedRow {
                file: name,
                line: 0,
                msg: format!("unknown distortion model '{other}'"),
            })
        }
    };
    let cam = CameraModel {
        focal: [focal[0], focal[1]],
        center: [center[0], center[1]],
        distortion: [coeffs[0], coeffs[1], coeffs[2], coeffs[3]],
        kind,
        r_cam_imu: Quat([q[0], q[1], q[2], q[3]]).normalized().rot(),
        p_imu_in_cam: V3::of(p[0], p[1], p[2]),
        time_offset: t_off,
        width: res[0] as u32,
        height: res[1] as u32,
    };
    let noise = NoiseSpec {
        sigma_g: nums("imu.gyro_noise_rad_per_s_per_sqrthz", 1)?[0],
        sigma_a: nums("imu.accel_noise_m_per_s2_per_sqrthz", 1)?[0],
        sigma_wg: nums("imu.gyro_walk_rad_per_s2_per_sqrthz", 1)?[0],
        sigma_wa: nums("imu.accel_walk_m_per_s3_per_sqrthz", 1)?[0],
    };
    let gravity = nums("gravity_m_per_s2", 1)?[0];
    Ok((cam, noise, gravity))
}

/// Load a full sequence directory: calib.txt, imu.csv, tracks.csv and
/// optionally groundtruth.csv.
pub fn load_sequence(root: &Path, calib: Option<&Path>) -> Result<Sequence, DatasetError> {
    let calib_path = calib.map(|p| p.to_path_buf()).unwrap_or(root.join("calib.txt"));
    let (cam, noise, gravity_mag) = load_calibration(&calib_path)?;
    let imu = load_imu_csv(&root.join("imu.csv"))?;
    let frames = load_tracks_csv(&root.join("tracks.csv"))?;
    let truth_path = root.join("groundtruth.csv");
    let truth = if truth_path.exists() {
        Some(load_groundtruth_csv(&truth_path)?)
    } else {
        None
    };
    if imu.len() < 2 {
        return Err(DatasetError::MalformedRow {
            file: root.join("imu.csv").display().to_string(),
            line: 0,
            msg: "need at least two samples".into(),
        });
    }
    let duration = imu.last().unwrap().t - imu[0].t;
    let nominal = duration / (imu.len() - 1) as f64;
    let dropouts = imu
        .windows(2)
        .filter(|w| (w[1].t - w[0].t) > 3.0 * nominal)
        .count();
    let cam_rate = if frames.len() >= 2 {
        (frames.len() - 1) as f64
            / ((frames.last().unwrap().t_ns - frames[0].t_ns) as f64 * 1e-9)
    } else {
        0.0
    };
    let summary = SequenceSummary {
        duration_s: duration,
        imu_rate_hz: 1.0 / nominal,
        cam_rate_hz: cam_rate,
        imu_dropouts: dropouts,
        n_frames: frames.len(),
        n_tracks: {
            let mut ids: Vec<u64> =
                frames.iter().flat_map(|f| f.obs.iter().map(|o| o.0)).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        },
    };
    Ok(Sequence { imu, frames, truth, cam, noise, gravity_mag, summary })
}

/// Export a synthesized run in the sequence layout; the written numbers
/// round-trip bit-exactly through the loaders.
pub fn write_sequence(
    root: &Path,
    data: &SimData,
    cam: &CameraModel<f64>,
    noise: &NoiseSpec,
    gravity_mag: f64,
) -> Result<(), DatasetError> {
    std::fs::create_dir_all(root)?;
    let mut imu = String::from("t_ns,wx,wy,wz,ax,ay,az\n");
    for s in &data.imu {
        let t_ns = (s.t * 1e9).round() as i64;
        writeln!(
            imu,
            "{},{},{},{},{},{},{}",
            t_ns, s.gyro.x(), s.gyro.y(), s.gyro.z(), s.accel.x(), s.accel.y(), s.accel.z()
        )
        .unwrap();
    }
    std::fs::write(root.join("imu.csv"), imu)?;

    let mut tr = String::from("t_ns,fid,u,v\n");
    for f in &data.frames {
        for &(fid, u, v) in &f.obs {
            writeln!(tr, "{},{},{},{}", f.t_ns, fid, u, v).unwrap();
        }
    }
    std::fs::write(root.join("tracks.csv"), tr)?;

    let mut gt = String::from("t_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz\n");
    for t in &data.truth {
        writeln!(
            gt,
            "{},{},{},{},{},{},{},{},{},{},{}",
            t.t_ns,
            t.p.x(), t.p.y(), t.p.z(),
            t.q.w(), t.q.0[0], t.q.0[1], t.q.0[2],
            t.v.x(), t.v.y(), t.v.z()
        )
        .unwrap();
    }
    std::fs::write(root.join("groundtruth.csv"), gt)?;
    std::fs::write(root.join("calib.txt"), calibration_text(cam, noise, gravity_mag))?;
    Ok(())
}

pub fn calibration_text(cam: &CameraModel<f64>, noise: &NoiseSpec, gravity_mag: f64) -> String {
    let q = Quat::from_rot(cam.r_cam_imu);
    let model = match cam.kind {
        DistortionKind::RadTan => "radtan",
        DistortionKind::Equidistant => "equidistant",
    };
    format!(
        "# camera and IMU calibration (unit suffixes are mandatory)\n\
         cam.focal_px = {} {}\n\
         cam.center_px = {} {}\n\
         cam.distortion_model = {}\n\
         cam.distortion_coeffs = {} {} {} {}\n\
         cam.resolution_px = {} {}\n\
         cam.time_offset_s = {}\n\
         extrinsics.rot_imu_to_cam_quat_xyzw = {} {} {} {}\n\
         extrinsics.p_imu_in_cam_m = {} {} {}\n\
         imu.gyro_noise_rad_per_s_per_sqrthz = {}\n\
         imu.gyro_walk_rad_per_s2_per_sqrthz = {}\n\
         imu.accel_noise_m_per_s2_per_sqrthz = {}\n\
         imu.accel_walk_m_per_s3_per_sqrthz = {}\n\
         gravity_m_per_s2 = {}\n",
        cam.focal[0], cam.focal[1],
        cam.center[0], cam.center[1],
        model,
        cam.distortion[0], cam.distortion[1], cam.distortion[2], cam.distortion[3],
        cam.width, cam.height,
        cam.time_offset,
        q.0[0], q.0[1], q.0[2], q.0[3],
        cam.p_imu_in_cam.x(), cam.p_imu_in_cam.y(), cam.p_imu_in_cam.z(),
        noise.sigma_g, noise.sigma_wg, noise.sigma_a, noise.sigma_wa,
        gravity_mag
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::M3;
    use crate::sim::{synthesize, SimConfig, TrajectorySpec};

    fn cam() -> CameraModel<f64> {
        let mut c = CameraModel::pinhole(450.0, 320.0, 240.0, 640, 480);
        c.r_cam_imu = M3::from_rows(
            V3::of(0.0, -1.0, 0.0),
            V3::of(0.0, 0.0, -1.0),
            V3::of(1.0, 0.0, 0.0),
        );
        c.p_imu_in_cam = V3::of(0.01, -0.02, 0.05);
        c
    }

    #[test]
    fn minimal_fixture_parses_exact_values() {
        let dir = std::env::temp_dir().join("srfvio_ds_fixture");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("imu.csv"),
            "t_ns,wx,wy,wz,ax,ay,az\n0,0.1,0.2,0.3,9.0,0.5,-0.25\n2500000,0.1,0.2,0.3,9.0,0.5,-0.25\n5000000,0.4,0.5,0.6,8.0,0.25,0.125\n",
        )
        .unwrap();
        let imu = load_imu_csv(&dir.join("imu.csv")).unwrap();
        assert_eq!(imu.len(), 3);
        assert_eq!(imu[0].gyro.0, [0.1, 0.2, 0.3]);
        assert_eq!(imu[2].accel.0, [8.0, 0.25, 0.125]);
    }

    #[test]
    fn shuffled_timestamps_rejected_with_line_number() {
        let dir = std::env::temp_dir().join("srfvio_ds_shuffled");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("imu.csv"),
            "t_ns,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,0\n5000000,0,0,0,0,0,0\n2500000,0,0,0,0,0,0\n",
        )
        .unwrap();
        match load_imu_csv(&dir.join("imu.csv")) {
            Err(DatasetError::MalformedRow { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected malformed row, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_track_keys_rejected() {
        let dir = std::env::temp_dir().join("srfvio_ds_dup");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("tracks.csv"),
            "t_ns,fid,u,v\n0,7,100.0,200.0\n0,7,101.0,201.0\n",
        )
        .unwrap();
        assert!(matches!(
            load_tracks_csv(&dir.join("tracks.csv")),
            Err(DatasetError::MalformedRow { line: 3, .. })
        ));
    }

    #[test]
    fn calibration_round_trip_and_ambiguity() {
        let noise =
            NoiseSpec { sigma_g: 2.0e-4, sigma_a: 5.0e-4, sigma_wg: 2.0e-5, sigma_wa: 4.0e-4 };
        let text = calibration_text(&cam(), &noise, 9.81);
        let dir = std::env::temp_dir().join("srfvio_ds_calib");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("calib.txt"), &text).unwrap();
        let (c2, n2, g2) = load_calibration(&dir.join("calib.txt")).unwrap();
        assert_eq!(c2.focal, cam().focal);
        assert!(c2.r_cam_imu.sub(cam().r_cam_imu).max_abs() < 1e-12);
        assert_eq!(n2.sigma_g, noise.sigma_g);
        assert_eq!(g2, 9.81);

        // a key without its unit suffix is ambiguous, never guessed
        std::fs::write(dir.join("bad.txt"), "imu.gyro_noise = 2e-4\n").unwrap();
        assert!(matches!(
            load_calibration(&dir.join("bad.txt")),
            Err(DatasetError::UnitsAmbiguous { .. })
        ));
    }

    #[test]
    fn synthetic_export_import_round_trip_is_bit_exact() {
        let spec = TrajectorySpec::excited(1.0, 3);
        let cfg = SimConfig { seed: 9, tracked_features: 25, ..Default::default() };
        let data = synthesize(&spec, &cfg, &cam());
        let dir = std::env::temp_dir().join("srfvio_ds_roundtrip");
        write_sequence(&dir, &data, &cam(), &cfg.noise, 9.81).unwrap();
        let seq = load_sequence(&dir, None).unwrap();
        assert_eq!(seq.imu.len(), data.imu.len());
        for (a, b) in seq.imu.iter().zip(&data.imu) {
            assert_eq!(a.gyro.0, b.gyro.0);
            assert_eq!(a.accel.0, b.accel.0);
            assert_eq!((a.t * 1e9).round() as i64, (b.t * 1e9).round() as i64);
        }
        assert_eq!(seq.frames.len(), data.frames.len());
        for (a, b) in seq.frames.iter().zip(&data.frames) {
            assert_eq!(a.t_ns, b.t_ns);
            assert_eq!(a.obs, b.obs);
        }
        let truth = seq.truth.unwrap();
        for (a, b) in truth.iter().zip(&data.truth) {
            assert_eq!(a.p.0, b.p.0);
            assert_eq!(a.v.0, b.v.0);
            let dot: f64 = (0..4).map(|i| a.q.0[i] * b.q.0[i]).sum();
            assert!(dot.abs() > 1.0 - 1e-15);
        }
        assert!(seq.summary.imu_dropouts == 0);
        assert!((seq.summary.imu_rate_hz - 400.0).abs() < 1.0);
    }
}
