//! End-to-end protocol tests against a live server on an ephemeral port.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::Command as Process;

use futures::{SinkExt, StreamExt};
use rnnscope_core::trainer::NetworkConfig;
use rnnscope_service::protocol::command_envelope;
use rnnscope_service::server::{bind, serve, Connection};
use rnnscope_service::{Command, Envelope, MessageType, Snapshot, View};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio_tungstenite::tungstenite::Message;

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

fn small() -> NetworkConfig {
    NetworkConfig {
        hidden: 4,
        window: 6,
        horizon: 2,
        batch_size: 2,
        batches_per_epoch: 2,
        seed: 11,
        ..NetworkConfig::default()
    }
}

async fn start(static_dir: Option<PathBuf>) -> SocketAddr {
    let listener = bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, small(), static_dir));
    addr
}

async fn connect(addr: SocketAddr) -> Socket {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
    ws
}

async fn recv(ws: &mut Socket) -> Envelope {
    loop {
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => return serde_json::from_str(t.as_str()).unwrap(),
            _ => continue,
        }
    }
}

async fn send(ws: &mut Socket, seq: u64, cmd: Command) {
    let text = serde_json::to_string(&command_envelope(seq, &cmd)).unwrap();
    ws.send(Message::Text(text.into())).await.unwrap();
}

fn snapshot(env: Envelope) -> Snapshot {
    assert_eq!(env.kind, MessageType::Snapshot, "{:?}", env.body);
    serde_json::from_value(env.body).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn hello_then_three_epochs() {
    let addr = start(None).await;
    let mut ws = connect(addr).await;
    let hello = recv(&mut ws).await;
    assert_eq!(hello.kind, MessageType::Hello);
    assert_eq!(hello.body["protocol_version"], "1");
    let first = snapshot(recv(&mut ws).await);
    assert_eq!(first.epoch, 0);
    assert!(first.loss_history.is_empty());

    let mut epochs = Vec::new();
    for seq in 0..3 {
        send(&mut ws, seq, Command::Step).await;
        epochs.push(snapshot(recv(&mut ws).await).epoch);
    }
    assert_eq!(epochs, [1, 2, 3]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cell_mode_reports_the_four_forward_stages_in_order() {
    let addr = start(None).await;
    let mut ws = connect(addr).await;
    recv(&mut ws).await;
    recv(&mut ws).await;
    send(&mut ws, 0, Command::SetView { view: View::Cell { layer: 0 } }).await;
    recv(&mut ws).await;
    let mut labels = Vec::new();
    for seq in 1..=4 {
        send(&mut ws, seq, Command::Step).await;
        let snap = snapshot(recv(&mut ws).await);
        labels.push(snap.event.unwrap().detail.label());
    }
    assert_eq!(
        labels,
        [
            "receiving the layer input",
            "calculating the gate activations",
            "updating the cell state",
            "outputting the activation value"
        ]
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn connections_are_isolated() {
    let addr = start(None).await;
    let mut a = connect(addr).await;
    let mut b = connect(addr).await;
    for ws in [&mut a, &mut b] {
        recv(ws).await;
        recv(ws).await;
    }
    for seq in 0..2 {
        send(&mut a, seq, Command::Step).await;
        recv(&mut a).await;
    }
    send(&mut b, 0, Command::Pause).await;
    let sb = snapshot(recv(&mut b).await);
    assert_eq!(sb.epoch, 0);
    send(&mut a, 2, Command::Pause).await;
    let sa = snapshot(recv(&mut a).await);
    assert_eq!(sa.epoch, 2);
    assert_ne!(sa.session_id, sb.session_id);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_commands_keep_the_connection_open() {
    let addr = start(None).await;
    let mut ws = connect(addr).await;
    recv(&mut ws).await;
    recv(&mut ws).await;
    ws.send(Message::Text("{\"type\":\"command\"".into())).await.unwrap();
    let err = recv(&mut ws).await;
    assert_eq!(err.kind, MessageType::Error);
    assert!(err.body["message"].as_str().unwrap().contains("malformed envelope"));
    send(&mut ws, 0, Command::Step).await;
    assert_eq!(snapshot(recv(&mut ws).await).epoch, 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn play_streams_snapshots_until_paused() {
    let addr = start(None).await;
    let mut ws = connect(addr).await;
    recv(&mut ws).await;
    recv(&mut ws).await;
    send(&mut ws, 0, Command::SetPace { rate: 50.0 }).await;
    recv(&mut ws).await;
    send(&mut ws, 1, Command::Play).await;
    assert!(snapshot(recv(&mut ws).await).playing);
    let mut last = 0;
    for _ in 0..3 {
        last = snapshot(recv(&mut ws).await).epoch;
    }
    assert!(last >= 3);
    send(&mut ws, 2, Command::Pause).await;
    // Snapshots already in flight may precede the pause acknowledgement.
    loop {
        let s = snapshot(recv(&mut ws).await);
        if !s.playing {
            break;
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serves_static_files_alongside_the_socket() {
    let dir = std::env::temp_dir().join(format!("rnnscope-static-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("index.html"), "<title>ui bundle</title>").unwrap();
    let addr = start(Some(dir.clone())).await;

    let mut tcp = tokio::net::TcpStream::connect(addr).await.unwrap();
    tcp.write_all(b"GET /index.html HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut body = String::new();
    tcp.read_to_string(&mut body).await.unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    assert!(body.contains("ui bundle"));

    let mut ws = connect(addr).await;
    assert_eq!(recv(&mut ws).await.kind, MessageType::Hello);
    std::fs::remove_dir_all(dir).unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bind_failure_names_the_address() {
    let listener = bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = listener.local_addr().unwrap();
    let err = bind(addr).await.unwrap_err();
    assert!(err.to_string().contains(&addr.to_string()));
}

#[test]
fn headless_training_matches_interactive_stepping() {
    let epochs = 5;
    let out = Process::new(env!("CARGO_BIN_EXE_rnnscope"))
        .args(["train", "--task", "sawtooth", "--seed", "3", "--epochs", &epochs.to_string()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    let headless: Vec<rnnscope_core::trainer::LossRecord> = reader.deserialize().map(Result::unwrap).collect();

    let cfg = NetworkConfig {
        task: rnnscope_core::Task::Sawtooth,
        seed: 3,
        ..NetworkConfig::default()
    };
    let (mut conn, _) = Connection::open(&cfg).unwrap();
    let mut last = None;
    for seq in 0..epochs {
        let text = serde_json::to_string(&command_envelope(seq, &Command::Step)).unwrap();
        last = conn.on_text(&text).pop();
    }
    let interactive = snapshot(last.unwrap()).loss_history;
    assert_eq!(headless, interactive);
}

#[test]
fn snapshot_files_are_self_contained() {
    let (mut conn, _) = Connection::open(&small()).unwrap();
    for (seq, cmd) in [
        Command::Step,
        Command::SetView { view: View::Cell { layer: 0 } },
        Command::Step,
        Command::Step,
    ]
    .into_iter()
    .enumerate()
    {
        conn.on_text(&serde_json::to_string(&command_envelope(seq as u64, &cmd)).unwrap());
    }
    let snap = conn.controller().snapshot();
    let path = std::env::temp_dir().join(format!("rnnscope-snapshot-{}.json", std::process::id()));
    std::fs::write(&path, snap.to_json()).unwrap();
    let loaded = Snapshot::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
    std::fs::remove_file(path).unwrap();
    assert_eq!(loaded, snap);
    assert_eq!(loaded.epoch, 1);
    assert!(loaded.validation.is_some());
    assert!(loaded.cell.is_some());
    assert!(loaded.event.is_some());
}
