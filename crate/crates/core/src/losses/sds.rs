//! Score-distillation plumbing. A [`PriorProvider`] turns a rendered view
//! into an image-space gradient; [`sds_step`] scales it and hands it to the
//! renderer's backward pass.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{Camera, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct PriorGradient {
    /// `H × W × 3`
    pub grad: Image,
    pub weight: f64,
}

/// Everything a provider may look at. Providers must not mutate it.
#[derive(Clone, Copy, Debug)]
pub struct PriorRequest<'a> {
    pub render: &'a Image,
    pub reference: &'a Image,
    pub camera: &'a Camera,
    /// Normalized frame time of the render.
    pub time: f64,
    pub tau: f64,
    pub seed: u64,
}

pub trait PriorProvider: Send + Sync {
    fn name(&self) -> &str;
    fn prior_gradient(&self, req: &PriorRequest) -> Result<PriorGradient>;
    /// True if the gradient is always zero, letting callers skip the render.
    fn abstains(&self) -> bool {
        false
    }
}

/// Always abstains.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroProvider;

impl PriorProvider for ZeroProvider {
    fn name(&self) -> &str {
        "zero"
    }

    fn abstains(&self) -> bool {
        true
    }

    fn prior_gradient(&self, req: &PriorRequest) -> Result<PriorGradient> {
        Ok(PriorGradient {
            grad: Image::new(req.render.width, req.render.height, 3),
            weight: 1.0,
        })
    }
}

/// Renders the ground truth for a camera and normalized time.
pub type GroundTruthFn = Box<dyn Fn(&Camera, f64) -> Result<Image> + Send + Sync>;

/// Returns `2 (render − ground truth)`: the gradient of the squared error
/// against a known novel view.
pub struct OracleProvider {
    ground_truth: GroundTruthFn,
}

impl OracleProvider {
    pub fn new(ground_truth: GroundTruthFn) -> Self {
        Self { ground_truth }
    }
}

impl PriorProvider for OracleProvider {
    fn name(&self) -> &str {
        "oracle"
    }

    fn prior_gradient(&self, req: &PriorRequest) -> Result<PriorGradient> {
        let gt = (self.ground_truth)(req.camera, req.time)?;
        req.render.ensure_same_shape(&gt, "oracle ground truth")?;
        let data = req.render.data.iter().zip(&gt.data).map(|(r, g)| 2.0 * (r - g)).collect();
        Ok(PriorGradient {
            grad: Image::from_data(gt.width, gt.height, gt.channels, data)?,
            weight: 1.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub url: String,
    pub timeout_secs: f64,
    /// Extra attempts after the first failure.
    pub retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            timeout_secs: 30.0,
            retries: 1,
        }
    }
}

/// Camera as sent over the wire. `fov_deg` is the horizontal field of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireCamera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_deg: f64,
}

pub fn camera_to_wire(cam: &Camera) -> WireCamera {
    let c = cam.center();
    let forward = cam.rotation.row(2).transpose();
    // image y points down
    let up = -cam.rotation.row(1).transpose();
    let target = c + forward;
    WireCamera {
        position: [c.x, c.y, c.z],
        look_at: [target.x, target.y, target.z],
        up: [up.x, up.y, up.z],
        fov_deg: 2.0 * (0.5 * cam.width as f64 / cam.fx).atan().to_degrees(),
    }
}

#[derive(Serialize)]
struct WireRequest {
    render: String,
    reference: String,
    camera: WireCamera,
    tau: f64,
    seed: u64,
    time: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    grad: String,
    weight: f64,
}

/// JSON over HTTP to an external prior service.
pub struct RemoteProvider {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if config.url.is_empty() {
            return Err(Error::Config("remote provider needs a URL".into()));
        }
        if !(config.timeout_secs > 0.0) {
            return Err(Error::Config("remote timeout must be positive".into()));
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build();
        Ok(Self { config, agent })
    }

    fn call(&self, body: &WireRequest, w: usize, h: usize) -> Result<PriorGradient> {
        let resp: WireResponse = self
            .agent
            .post(&self.config.url)
            .send_json(body)
            .map_err(|e| Error::Provider(format!("request to {}: {e}", self.config.url)))?
            .into_json()
            .map_err(|e| Error::Provider(format!("bad response body: {e}")))?;
        let bytes = B64
            .decode(resp.grad.as_bytes())
            .map_err(|e| Error::Provider(format!("grad is not base64: {e}")))?;
        if bytes.len() != w * h * 3 * 4 {
            return Err(Error::Provider(format!(
                "grad has {} bytes, expected {} for {w}×{h}×3 f32",
                bytes.len(),
                w * h * 12
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(PriorGradient {
            grad: Image::from_data(w, h, 3, data)?,
            weight: resp.weight,
        })
    }
}

impl PriorProvider for RemoteProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn prior_gradient(&self, req: &PriorRequest) -> Result<PriorGradient> {
        let body = WireRequest {
            render: B64.encode(req.render.to_png()?),
            reference: B64.encode(req.reference.to_png()?),
            camera: camera_to_wire(req.camera),
            tau: req.tau,
            seed: req.seed,
            time: req.time,
        };
        let mut last = None;
        for attempt in 0..=self.config.retries {
            match self.call(&body, req.render.width, req.render.height) {
                Ok(g) => return Ok(g),
                Err(e) => {
                    log::warn!("prior request attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdsOutcome {
    /// Upstream color gradient for the renderer, already scaled.
    pub grad: Image,
    /// The provider failed or returned unusable data; `grad` is zero.
    pub skipped: bool,
}

/// Queries the provider and scales its gradient by `lambda` and the provider
/// weight. Provider failures become a skipped (zero) step.
pub fn sds_step(provider: &dyn PriorProvider, req: &PriorRequest, lambda: f64) -> Result<SdsOutcome> {
    if !(req.tau > 0.0 && req.tau < 1.0) {
        return Err(Error::InvalidInput(format!("tau {} outside (0, 1)", req.tau)));
    }
    let zero = || Image::new(req.render.width, req.render.height, req.render.channels);
    let g = match provider.prior_gradient(req) {
        Ok(g) => g,
        Err(e) => {
            log::warn!("{} prior skipped: {e}", provider.name());
            return Ok(SdsOutcome { grad: zero(), skipped: true });
        }
    };
    if !g.grad.same_shape(req.render) || !g.weight.is_finite() || g.grad.data.iter().any(|v| !v.is_finite()) {
        log::warn!("{} prior returned an unusable gradient; skipped", provider.name());
        return Ok(SdsOutcome { grad: zero(), skipped: true });
    }
    Ok(SdsOutcome {
        grad: g.grad.scaled(lambda * g.weight),
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn cam() -> Camera {
        Camera::look_at(Vector3::new(0.0, 1.0, -3.0), Vector3::zeros(), Vector3::y(), 60.0, 4, 3)
    }

    fn req<'a>(render: &'a Image, reference: &'a Image, camera: &'a Camera) -> PriorRequest<'a> {
        PriorRequest { render, reference, camera, time: 0.5, tau: 0.5, seed: 7 }
    }

    #[test]
    fn zero_provider_gives_zero() {
        let r = Image::filled(4, 3, &[0.3, 0.2, 0.1]);
        let c = cam();
        let out = sds_step(&ZeroProvider, &req(&r, &r, &c), 1.0).unwrap();
        assert!(!out.skipped);
        assert!(out.grad.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_is_l2_gradient() {
        let gt = Image::filled(4, 3, &[0.5, 0.5, 0.5]);
        let gt2 = gt.clone();
        let p = OracleProvider::new(Box::new(move |_, _| Ok(gt2.clone())));
        let r = Image::filled(4, 3, &[0.7, 0.5, 0.2]);
        let c = cam();
        let out = sds_step(&p, &req(&r, &r, &c), 0.5).unwrap();
        for (k, g) in out.grad.data.iter().enumerate() {
            assert!((g - 0.5 * 2.0 * (r.data[k] - gt.data[k])).abs() < 1e-15);
        }
    }

    struct Failing;
    impl PriorProvider for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn prior_gradient(&self, _: &PriorRequest) -> Result<PriorGradient> {
            Err(Error::Provider("down".into()))
        }
    }

    #[test]
    fn provider_failure_is_skipped() {
        let r = Image::filled(4, 3, &[0.3, 0.2, 0.1]);
        let c = cam();
        let out = sds_step(&Failing, &req(&r, &r, &c), 1.0).unwrap();
        assert!(out.skipped);
        assert!(out.grad.data.iter().all(|&v| v == 0.0));
    }

    /// Seeded noise, standing in for a stochastic prior.
    struct Noise;
    impl PriorProvider for Noise {
        fn name(&self) -> &str {
            "noise"
        }
        fn prior_gradient(&self, req: &PriorRequest) -> Result<PriorGradient> {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(req.seed);
            let data = (0..req.render.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Ok(PriorGradient {
                grad: Image::from_data(req.render.width, req.render.height, 3, data)?,
                weight: 1.0,
            })
        }
    }

    #[test]
    fn seeded_provider_is_bit_identical() {
        let r = Image::filled(4, 3, &[0.3, 0.2, 0.1]);
        let c = cam();
        let a = sds_step(&Noise, &req(&r, &r, &c), 0.3).unwrap();
        let b = sds_step(&Noise, &req(&r, &r, &c), 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tau_must_be_open_interval() {
        let r = Image::filled(4, 3, &[0.3, 0.2, 0.1]);
        let c = cam();
        let mut q = req(&r, &r, &c);
        q.tau = 1.0;
        assert!(sds_step(&ZeroProvider, &q, 1.0).is_err());
    }

    #[test]
    fn wire_camera_round_trips_pose() {
        let c = cam();
        let w = camera_to_wire(&c);
        let back = Camera::look_at(
            Vector3::from(w.position),
            Vector3::from(w.look_at),
            Vector3::from(w.up),
            w.fov_deg,
            c.width,
            c.height,
        );
        assert!((back.rotation - c.rotation).abs().max() < 1e-12);
        assert!((back.translation - c.translation).abs().max() < 1e-12);
        assert!((back.fx - c.fx).abs() < 1e-9);
    }

    /// One-shot HTTP server answering every request with `body`; returns the URL
    /// and a handle yielding the raw request bodies it saw.
    fn serve(body: String, requests: usize) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/prior", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for _ in 0..requests {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(String::from_utf8(buf).unwrap());
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                )
                .unwrap();
            }
            seen
        });
        (url, handle)
    }

    #[test]
    fn remote_provider_speaks_the_wire_format() {
        let vals: Vec<f32> = (0..4 * 3 * 3).map(|i| i as f32 * 0.25 - 1.0).collect();
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let body = serde_json::json!({ "grad": B64.encode(&bytes), "weight": 2.0 }).to_string();
        let (url, handle) = serve(body, 1);
        let p = RemoteProvider::new(RemoteConfig { url, timeout_secs: 10.0, retries: 0 }).unwrap();
        let r = Image::filled(4, 3, &[0.3, 0.2, 0.1]);
        let c = cam();
        let out = sds_step(&p, &req(&r, &r, &c), 0.5).unwrap();
        assert!(!out.skipped);
        for (k, g) in out.grad.data.iter().enumerate() {
            assert_eq!(*g, vals[k] as f64);
        }
        let seen = handle.join().unwrap();
        let v: serde_json::Value = serde_json::from_str(&seen[0]).unwrap();
        assert_eq!(v["tau"], 0.5);
        assert_eq!(v["seed"], 7);
        let png = B64.decode(v["render"].as_str().unwrap()).unwrap();
        let decoded = Image::decode(&png, 3).unwrap();
        assert_eq!(decoded.to_u8(), r.to_u8());
        assert_eq!(v["camera"]["fov_deg"].as_f64().unwrap().round(), 60.0);
    }

    #[test]
    fn remote_bad_payload_is_skipped() {
        let body = serde_json::json!({ "grad": B64.encode([0u8; 8]), "weight": 1.0 }).to_string();
        let (url, handle) = serve(body, 2);
        let p = RemoteProvider::new(RemoteConfig { url, timeout_secs: 10.0, retries: 1 }).unwrap();
        let r = Image::filled(4, 3, &[0.3, 0.2, 0.1]);
        let c = cam();
        let out = sds_step(&p, &req(&r, &r, &c), 1.0).unwrap();
        assert!(out.skipped);
        assert_eq!(handle.join().unwrap().len(), 2);
    }

    #[test]
    fn remote_unreachable_is_skipped() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        let p = RemoteProvider::new(RemoteConfig { url, timeout_secs: 2.0, retries: 0 }).unwrap();
        let r = Image::filled(4, 3, &[0.3, 0.2, 0.1]);
        let c = cam();
        assert!(sds_step(&p, &req(&r, &r, &c), 1.0).unwrap().skipped);
    }
}
