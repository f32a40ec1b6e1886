use std::process::{Command, Stdio};
use std::time::Instant;

fn timed(label: &str, f: impl Fn()) {
    let t = Instant::now();
    for _ in 0..5 { f(); }
    println!("{label}: {:?} per call", t.elapsed() / 5);
}

fn main() {
    timed("sh -c true, piped", || {
        Command::new("sh").arg("-c").arg("true").stdout(Stdio::piped()).stderr(Stdio::piped()).output().unwrap();
    });
    timed("sh -c python3 -S -c pass, output()", || {
        Command::new("sh").arg("-c").arg("python3 -S -c pass").output().unwrap();
    });
    timed("python3 direct, output()", || {
        Command::new("python3").arg("-S").arg("-c").arg("pass").output().unwrap();
    });
    timed("sh -c python3, tempfile stdio + poll", || {
        let out = tempfile::tempfile().unwrap();
        let err = tempfile::tempfile().unwrap();
        let mut child = Command::new("sh").arg("-c").arg("python3 -S -c pass")
            .stdin(Stdio::null())
            .stdout(Stdio::from(out.try_clone().unwrap()))
            .stderr(Stdio::from(err.try_clone().unwrap()))
            .spawn().unwrap();
        loop {
            if child.try_wait().unwrap().is_some() { break; }
            std::thread::sleep(std::time::Duration::from_millis(5));
        }
    });
}
