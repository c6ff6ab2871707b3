//! The three prior providers on one rendered view of the synthetic arm.
//! The remote provider talks to a tiny in-process HTTP server that answers
//! every request with a constant gradient.
//!
//! cargo run --release --example prior_providers

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use base64::Engine;
use bags::losses::{sds_step, OracleProvider, PriorProvider, PriorRequest, RemoteConfig, RemoteProvider, ZeroProvider};
use bags::synthetic::{ArmConfig, ArmScene};

fn mock_server(width: usize, height: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}/prior", listener.local_addr().unwrap());
    let grad: Vec<u8> = (0..width * height * 3).flat_map(|_| 0.5f32.to_le_bytes()).collect();
    let body = serde_json::json!({
        "grad": base64::engine::general_purpose::STANDARD.encode(grad),
        "weight": 2.0,
    })
    .to_string();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut req = vec![0; len];
            let _ = reader.read_exact(&mut req);
            let fields: serde_json::Value = serde_json::from_slice(&req).unwrap_or_default();
            eprintln!("server: tau {} seed {} camera {}", fields["tau"], fields["seed"], fields["camera"]);
            let mut s = stream;
            let _ = write!(
                s,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
        }
    });
    url
}

fn main() -> bags::Result<()> {
    let scene = ArmScene::new(ArmConfig {
        size: 48,
        splats: 600,
        ..ArmConfig::default()
    })?;
    let (camera, t) = scene.heldout_views()[1];
    // a slightly wrong render: the arm at a different time
    let render = scene.render(&camera, (t + 0.3).min(1.0)).color;
    let reference = scene.render(&scene.frame_camera(0), 0.0).color;
    let req = PriorRequest {
        render: &render,
        reference: &reference,
        camera: &camera,
        time: t,
        tau: 0.5,
        seed: 42,
    };

    let url = mock_server(render.width, render.height);
    let providers: Vec<Box<dyn PriorProvider>> = vec![
        Box::new(ZeroProvider),
        Box::new(OracleProvider::new(scene.ground_truth_fn())),
        Box::new(RemoteProvider::new(RemoteConfig {
            url,
            timeout_secs: 5.0,
            retries: 0,
        })?),
        Box::new(RemoteProvider::new(RemoteConfig {
            url: "http://127.0.0.1:9/unreachable".into(),
            timeout_secs: 1.0,
            retries: 0,
        })?),
    ];
    let lambda = 1e-4;
    for p in &providers {
        let out = sds_step(p.as_ref(), &req, lambda)?;
        let l1: f64 = out.grad.data.iter().map(|v| v.abs()).sum();
        println!(
            "{:>7}: abstains {:<5} skipped {:<5} |λ·w·grad|_1 {l1:.4e}",
            p.name(),
            p.abstains(),
            out.skipped
        );
    }
    Ok(())
}
