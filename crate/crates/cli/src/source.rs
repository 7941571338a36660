//! Standard input as a demand-driven source.

use std::io::BufRead;
use std::sync::mpsc;
use std::thread;

use pando_core::{Deliver, DemandSource, Outcome, Source, StreamError};

struct LineSource {
    requests: Option<mpsc::Sender<Deliver<String>>>,
}

impl Source<String> for LineSource {
    fn request(&mut self, abort: bool, deliver: Deliver<String>) {
        if abort {
            self.requests = None;
            return deliver(Outcome::End);
        }
        match &self.requests {
            Some(tx) => {
                if let Err(mpsc::SendError(deliver)) = tx.send(deliver) {
                    deliver(Outcome::End);
                }
            }
            None => deliver(Outcome::End),
        }
    }
}

/// Lines of `reader`, read on a dedicated thread one at a time and only when
/// requested, so nothing is consumed ahead of demand. Line terminators
/// (`\n` or `\r\n`) are stripped.
pub fn lines<R: BufRead + Send + 'static>(mut reader: R) -> DemandSource<String> {
    let (tx, rx) = mpsc::channel::<Deliver<String>>();
    thread::Builder::new()
        .name("pando-input".into())
        .spawn(move || {
            let mut done = false;
            for deliver in rx {
                if done {
                    deliver(Outcome::End);
                    continue;
                }
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => {
                        done = true;
                        deliver(Outcome::End);
                    }
                    Ok(_) => {
                        if line.ends_with('\n') {
                            line.pop();
                            if line.ends_with('\r') {
                                line.pop();
                            }
                        }
                        deliver(Outcome::Value(line));
                    }
                    Err(e) => {
                        done = true;
                        deliver(Outcome::Failure(StreamError::new("EINPUT", e.to_string())));
                    }
                }
            }
        })
        .expect("spawn input thread");
    Box::new(LineSource { requests: Some(tx) })
}
