//! Canonical state snapshots. A snapshot is everything a crash-state check
//! compares: the full namespace, file sizes, link counts, and a content
//! fingerprint per file. Directories that cannot be read and files whose
//! inodes were quarantined at mount show up as `Unreadable` rather than
//! aborting the walk.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hash::fnv64;
use crate::oracle::model::{ModelFs, ModelNode};
use crate::reffs::Reffs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapNode {
    Dir,
    File { size: u64, nlink: u32, sig: u64 },
    Unreadable,
}

/// A point-in-time view of a file system, keyed by path. The root is not a
/// key unless it is unreadable, in which case it appears under "".
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FsSnapshot {
    pub nodes: BTreeMap<String, SnapNode>,
}

fn disp(path: &str) -> &str {
    if path.is_empty() {
        "/"
    } else {
        path
    }
}

impl FsSnapshot {
    /// Human-readable lines describing this state, sorted by path.
    pub fn render_lines(&self) -> Vec<String> {
        if self.nodes.is_empty() {
            return vec!["(empty)".to_string()];
        }
        self.nodes
            .iter()
            .map(|(path, node)| match node {
                SnapNode::Dir => format!("dir {path}"),
                SnapNode::File { size, nlink, .. } => {
                    format!("file {path} size={size} links={nlink}")
                }
                SnapNode::Unreadable => format!("unreadable {}", disp(path)),
            })
            .collect()
    }

    /// Differences of `self` (the observed state) against `expected`, as
    /// stable labeled lines sorted by path. Empty means identical.
    pub fn diff(&self, expected: &FsSnapshot) -> Vec<String> {
        let mut out = Vec::new();
        let mut keys: Vec<&String> = self.nodes.keys().collect();
        for k in expected.nodes.keys() {
            if !self.nodes.contains_key(k) {
                keys.push(k);
            }
        }
        keys.sort();
        for k in keys {
            match (self.nodes.get(k), expected.nodes.get(k)) {
                (Some(a), Some(b)) if a == b => {}
                (Some(SnapNode::Unreadable), Some(_)) => {
                    out.push(format!("unreadable {}", disp(k)));
                }
                (Some(SnapNode::Dir), Some(SnapNode::File { .. }))
                | (Some(SnapNode::File { .. }), Some(SnapNode::Dir)) => {
                    out.push(format!("kind differs at {k}"));
                }
                // Equal variants were handled by the first arm.
                (Some(SnapNode::Dir), Some(SnapNode::Dir)) => unreachable!(),
                (
                    Some(SnapNode::File { size: sa, nlink: la, sig: ga }),
                    Some(SnapNode::File { size: sb, nlink: lb, sig: gb }),
                ) => {
                    if sa != sb {
                        out.push(format!("size differs at {k}: {sa} vs {sb}"));
                    }
                    if la != lb {
                        out.push(format!("links differ at {k}: {la} vs {lb}"));
                    }
                    if sa == sb && ga != gb {
                        out.push(format!("content differs at {k}"));
                    }
                }
                (Some(_), Some(SnapNode::Unreadable)) => {
                    // The expected side never contains unreadable nodes; keep
                    // the arm for completeness.
                    out.push(format!("kind differs at {k}"));
                }
                (Some(_), None) => out.push(format!("unexpected {}", disp(k))),
                (None, Some(_)) => out.push(format!("missing {}", disp(k))),
                (None, None) => unreachable!(),
            }
        }
        out
    }
}

/// Walk a mounted device image into a snapshot. Corruption is contained:
/// an unreadable directory hides its subtree, an unreadable file keeps its
/// name with no attributes.
pub fn snapshot_reffs(fs: &mut Reffs) -> FsSnapshot {
    let mut snap = FsSnapshot::default();
    let mut stack = vec![String::new()];
    while let Some(dir) = stack.pop() {
        let names = match fs.readdir(&dir) {
            Ok(names) => names,
            Err(_) => {
                snap.nodes.insert(dir, SnapNode::Unreadable);
                continue;
            }
        };
        for name in names {
            let path = if dir.is_empty() { name } else { format!("{dir}/{name}") };
            let st = match fs.stat(&path) {
                Ok(st) => st,
                Err(_) => {
                    snap.nodes.insert(path, SnapNode::Unreadable);
                    continue;
                }
            };
            if st.is_dir {
                snap.nodes.insert(path.clone(), SnapNode::Dir);
                stack.push(path);
            } else {
                match fs.read_file(&path) {
                    Ok(content) => {
                        snap.nodes.insert(
                            path,
                            SnapNode::File {
                                size: st.size,
                                nlink: st.nlink,
                                sig: fnv64(&content),
                            },
                        );
                    }
                    Err(_) => {
                        snap.nodes.insert(path, SnapNode::Unreadable);
                    }
                }
            }
        }
    }
    snap
}

/// Project the model into the same snapshot form.
pub fn snapshot_model(m: &ModelFs) -> FsSnapshot {
    let mut snap = FsSnapshot::default();
    for (path, node) in &m.nodes {
        let entry = match node {
            ModelNode::Dir => SnapNode::Dir,
            ModelNode::File(idx) => {
                let inode = &m.inodes[*idx];
                SnapNode::File {
                    size: inode.content.len() as u64,
                    nlink: inode.nlink,
                    sig: fnv64(&inode.content),
                }
            }
        };
        snap.nodes.insert(path.clone(), entry);
    }
    snap
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cov::CovSet;
    use crate::pmem::PmDevice;
    use crate::reffs::{self, FaultConfig};
    use crate::workload::FsError;

    fn fresh() -> (PmDevice, CovSet) {
        let mut dev = PmDevice::new(1 << 20, 64).unwrap();
        reffs::mkfs(&mut dev, false).unwrap();
        (dev, CovSet::new())
    }

    #[test]
    fn device_and_model_agree_on_a_mixed_tree() {
        let (mut dev, mut cov) = fresh();
        let mut fs = reffs::mount(&mut dev, &FaultConfig::none(), &mut cov).unwrap();
        let mut m = ModelFs::new();
        type Step = Box<dyn Fn(&mut reffs::Reffs, &mut ModelFs) -> (Result<(), FsError>, Result<(), FsError>)>;
        let ops: Vec<Step> = vec![
            Box::new(|f, m| (f.mkdir("A"), m.mkdir("A"))),
            Box::new(|f, m| (f.creat("A/f"), m.creat("A/f"))),
            Box::new(|f, m| (f.pwrite("A/f", 10, b"hello"), m.pwrite("A/f", 10, b"hello"))),
            Box::new(|f, m| (f.link("A/f", "g"), m.link("A/f", "g"))),
            Box::new(|f, m| (f.truncate("A/f", 12), m.truncate("A/f", 12))),
            Box::new(|f, m| (f.mkdir("A/B"), m.mkdir("A/B"))),
            Box::new(|f, m| (f.rename("A", "Z"), m.rename("A", "Z"))),
            Box::new(|f, m| (f.unlink("g"), m.unlink("g"))),
        ];
        for op in ops {
            let (a, b) = op(&mut fs, &mut m);
            assert_eq!(a, b);
        }
        assert_eq!(snapshot_reffs(&mut fs), snapshot_model(&m));
    }

    #[test]
    fn diff_lines_are_labeled_and_sorted() {
        let mut a = FsSnapshot::default();
        let mut b = FsSnapshot::default();
        a.nodes.insert("a".into(), SnapNode::File { size: 3, nlink: 1, sig: 1 });
        b.nodes.insert("a".into(), SnapNode::File { size: 3, nlink: 1, sig: 2 });
        a.nodes.insert("b".into(), SnapNode::Dir);
        b.nodes.insert("c".into(), SnapNode::Dir);
        b.nodes.insert("d".into(), SnapNode::File { size: 9, nlink: 2, sig: 7 });
        a.nodes.insert("d".into(), SnapNode::File { size: 8, nlink: 1, sig: 7 });
        assert_eq!(
            a.diff(&b),
            vec![
                "content differs at a".to_string(),
                "unexpected b".to_string(),
                "missing c".to_string(),
                "size differs at d: 8 vs 9".to_string(),
                "links differ at d: 1 vs 2".to_string(),
            ]
        );
        assert!(b.diff(&b).is_empty());
    }

    #[test]
    fn unreadable_nodes_render_and_diff() {
        let mut a = FsSnapshot::default();
        a.nodes.insert("x".into(), SnapNode::Unreadable);
        let mut b = FsSnapshot::default();
        b.nodes.insert("x".into(), SnapNode::File { size: 1, nlink: 1, sig: 0 });
        assert_eq!(a.diff(&b), vec!["unreadable x".to_string()]);
        assert_eq!(a.render_lines(), vec!["unreadable x".to_string()]);
        assert_eq!(FsSnapshot::default().render_lines(), vec!["(empty)".to_string()]);
    }
}
