//! Effective run configuration: built-in defaults, overridden by a
//! key-value config file, overridden by CLI flags. The resolved values are
//! echoed into every output directory.

use srfvio::imu::NoiseSpec;
use srfvio::sim::SimConfig;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub duration_s: f64,
    pub imu_rate_hz: f64,
    pub cam_rate_hz: f64,
    pub clones: usize,
    pub tracked_features: usize,
    pub max_msckf: usize,
    pub max_slam: usize,
    pub pixel_sigma_px: f64,
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub gyro_walk: f64,
    pub accel_walk: f64,
    pub chi2_confidence: f64,
    pub chi2_inflation: f64,
    pub init_window_s: f64,
    pub init_keyframes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            duration_s: 60.0,
            imu_rate_hz: 400.0,
            cam_rate_hz: 10.0,
            clones: 11,
            tracked_features: 100,
            max_msckf: 40,
            max_slam: 50,
            pixel_sigma_px: 1.0,
            gyro_noise: 2.0e-4,
            accel_noise: 5.0e-4,
            gyro_walk: 2.0e-5,
            accel_walk: 4.0e-4,
            chi2_confidence: 0.95,
            chi2_inflation: 1.0,
            init_window_s: 0.5,
            init_keyframes: 5,
        }
    }
}

impl RunConfig {
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let mut map = BTreeMap::new();
        for (i, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), i + 1))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        for (k, v) in map {
            let fv = || v.parse::<f64>().map_err(|_| format!("bad number for {k}: '{v}'"));
            let uv = || v.parse::<usize>().map_err(|_| format!("bad integer for {k}: '{v}'"));
            match k.as_str() {
                "duration_s" => self.duration_s = fv()?,
                "imu_rate_hz" => self.imu_rate_hz = fv()?,
                "cam_rate_hz" => self.cam_rate_hz = fv()?,
                "clones" => self.clones = uv()?,
                "tracked_features" => self.tracked_features = uv()?,
                "max_msckf" => self.max_msckf = uv()?,
                "max_slam" => self.max_slam = uv()?,
                "pixel_sigma_px" => self.pixel_sigma_px = fv()?,
                "gyro_noise" => self.gyro_noise = fv()?,
                "accel_noise" => self.accel_noise = fv()?,
                "gyro_walk" => self.gyro_walk = fv()?,
                "accel_walk" => self.accel_walk = fv()?,
                "chi2_confidence" => self.chi2_confidence = fv()?,
                "chi2_inflation" => self.chi2_inflation = fv()?,
                "init_window_s" => self.init_window_s = fv()?,
                "init_keyframes" => self.init_keyframes = uv()?,
                other => return Err(format!("unknown config key '{other}'")),
            }
        }
        Ok(())
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            noise: NoiseSpec {
                sigma_g: self.gyro_noise,
                sigma_a: self.accel_noise,
                sigma_wg: self.gyro_walk,
                sigma_wa: self.accel_walk,
            },
            imu_rate: self.imu_rate_hz,
            cam_rate: self.cam_rate_hz,
            num_clones: self.clones,
            tracked_features: self.tracked_features,
            max_msckf: self.max_msckf,
            max_slam: self.max_slam,
            pixel_sigma: self.pixel_sigma_px,
            seed,
            ..Default::default()
        }
    }

    pub fn echo(&self, seed: u64, extra: &[(&str, String)]) -> String {
        let mut s = String::from("# effective configuration\n");
        let mut push = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        push("seed", seed.to_string());
        push("duration_s", self.duration_s.to_string());
        push("imu_rate_hz", self.imu_rate_hz.to_string());
        push("cam_rate_hz", self.cam_rate_hz.to_string());
        push("clones", self.clones.to_string());
        push("tracked_features", self.tracked_features.to_string());
        push("max_msckf", self.max_msckf.to_string());
        push("max_slam", self.max_slam.to_string());
        push("pixel_sigma_px", self.pixel_sigma_px.to_string());
        push("gyro_noise", self.gyro_noise.to_string());
        push("accel_noise", self.accel_noise.to_string());
        push("gyro_walk", self.gyro_walk.to_string());
        push("accel_walk", self.accel_walk.to_string());
        push("chi2_confidence", self.chi2_confidence.to_string());
        push("chi2_inflation", self.chi2_inflation.to_string());
        push("init_window_s", self.init_window_s.to_string());
        push("init_keyframes", self.init_keyframes.to_string());
        for (k, v) in extra {
            push(k, v.clone());
        }
        s
    }
}
