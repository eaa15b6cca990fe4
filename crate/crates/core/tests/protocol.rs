use std::io::BufReader;
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use scenelat::flow::{Condition, FieldError, Stage};
use scenelat::generators::{builtin_handler, BuiltinField};
use scenelat::protocol::{
    serve, AdapterClient, AdapterEndpoint, AdapterEnvelope, AdapterError, AdapterField, Handshake,
};
use scenelat::{masked_complete, FlowConfig, FlowField, FlowTensor, PhiloxRng, RegenMask, Voxel};

type Handler = Box<dyn FnMut(&AdapterEnvelope) -> Result<AdapterEnvelope, String> + Send>;

const HS: Handshake = Handshake {
    sigma_min: 0.0,
    channels: 8,
    resolution: 16,
};

/// Serves one TCP connection on a background thread and returns a client.
fn tcp_adapter(handler: Handler, timeout: Duration) -> AdapterClient {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        let _ = serve(reader, stream, handler);
    });
    AdapterClient::connect(&AdapterEndpoint::Tcp(addr), timeout).unwrap()
}

fn mock_client() -> AdapterClient {
    tcp_adapter(
        Box::new(builtin_handler(BuiltinField::mock(5, 0.0), HS)),
        Duration::from_secs(30),
    )
}

fn bits(t: &FlowTensor) -> (Vec<usize>, Vec<u32>) {
    (t.shape().to_vec(), t.values().iter().map(|v| v.to_bits()).collect())
}

fn structure_condition() -> Condition {
    Condition {
        stage: Stage::Structure,
        origin: [16, 0, 0],
        region_shape: [16; 3],
        ..Default::default()
    }
}

#[test]
fn handshake_reports_adapter_values() {
    let mut client = mock_client();
    assert_eq!(client.handshake().unwrap(), HS);
}

#[test]
fn remote_field_matches_local_field_bitwise() {
    let local = BuiltinField::mock(5, 0.0);
    let remote = AdapterField::new(mock_client());
    let cond = structure_condition();
    let x = scenelat::flow::gaussian_tensor(vec![16, 16, 16], &mut PhiloxRng::new(3));
    for t in [1.0, 0.37, 0.02] {
        let a = local.evaluate(&x, t, &cond).unwrap();
        let b = remote.evaluate(&x, t, &cond).unwrap();
        assert_eq!(bits(&a), bits(&b));
    }

    let latent = Condition {
        stage: Stage::Latent,
        rows: vec![Voxel::new(1, 2, 3), Voxel::new(15, 15, 0)],
        ..cond
    };
    let x = FlowTensor::new(vec![2, 8], (0..16).map(|i| i as f32 * 0.25).collect()).unwrap();
    assert_eq!(
        bits(&local.evaluate(&x, 0.5, &latent).unwrap()),
        bits(&remote.evaluate(&x, 0.5, &latent).unwrap())
    );
}

#[test]
fn completion_through_adapter_is_identical() {
    let local = BuiltinField::mock(5, 0.0);
    let remote = AdapterField::new(mock_client());
    let cond = structure_condition();
    let known = FlowTensor::filled(vec![16, 16, 16], -1.0);
    let mut regen = vec![true; known.len()];
    regen[..1000].fill(false);
    let mask = RegenMask::new(vec![16, 16, 16], regen).unwrap();
    let cfg = FlowConfig {
        steps: 6,
        resamples: 2,
        ..Default::default()
    };
    let a = masked_complete(&known, &mask, &local, &cond, &cfg, &mut PhiloxRng::new(8)).unwrap();
    let b = masked_complete(&known, &mask, &remote, &cond, &cfg, &mut PhiloxRng::new(8)).unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn echo_preserves_tensor_bits() {
    let mut client = tcp_adapter(
        Box::new(|req: &AdapterEnvelope| {
            let x = req.get_tensor("x").map_err(|e| e.to_string())?;
            Ok(AdapterEnvelope::new("echo").tensor("x", &x))
        }),
        Duration::from_secs(30),
    );
    let values = vec![
        0.0,
        -0.0,
        f32::MIN_POSITIVE,
        f32::MIN_POSITIVE / 4.0,
        f32::MAX,
        -1e-30,
        0.1,
    ];
    let x = FlowTensor::new(vec![values.len()], values).unwrap();
    let r = client
        .call(AdapterEnvelope::new("echo").tensor("x", &x))
        .unwrap();
    let back = r.get_tensor("x").unwrap();
    for (a, b) in back.values().iter().zip(x.values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn wrong_output_shape_is_rejected() {
    let client = tcp_adapter(
        Box::new(|req: &AdapterEnvelope| {
            let x = req.get_tensor("x").map_err(|e| e.to_string())?;
            let short = FlowTensor::zeros(vec![x.len() - 1]);
            Ok(AdapterEnvelope::new(&req.op).tensor("v", &short))
        }),
        Duration::from_secs(30),
    );
    let field = AdapterField::new(client);
    let err = field
        .evaluate(&FlowTensor::zeros(vec![4, 4]), 0.5, &Condition::default())
        .unwrap_err();
    assert!(matches!(err, FieldError::ShapeClosure { .. }), "{err}");
}

#[test]
fn remote_errors_surface() {
    let mut client = mock_client();
    let err = client.call(AdapterEnvelope::new("no_such_op")).unwrap_err();
    assert!(matches!(err, AdapterError::RemoteError(ref m) if m.contains("no_such_op")));
    // the connection stays usable
    assert_eq!(client.handshake().unwrap(), HS);
}

#[test]
fn timeout_then_late_answer_is_skipped() {
    let mut client = tcp_adapter(
        Box::new(|req: &AdapterEnvelope| {
            if req.op == "slow" {
                thread::sleep(Duration::from_millis(400));
            }
            Ok(AdapterEnvelope::new(&req.op))
        }),
        Duration::from_millis(100),
    );
    assert!(matches!(
        client.call(AdapterEnvelope::new("slow")),
        Err(AdapterError::Timeout(_))
    ));
    thread::sleep(Duration::from_millis(500));
    let r = client.call(AdapterEnvelope::new("fast")).unwrap();
    assert_eq!(r.op, "fast");
}

#[test]
fn missing_adapter_command_fails_to_spawn() {
    let r = AdapterClient::connect(
        &AdapterEndpoint::Command(vec!["/nonexistent/adapter".into()]),
        Duration::from_secs(1),
    );
    assert!(matches!(r, Err(AdapterError::Io(_))));
}
