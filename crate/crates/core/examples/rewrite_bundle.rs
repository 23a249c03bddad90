//! Retarget a bundle onto the pgawt stubs and verify what is left.

use remote_playground::demo::{assemble_file, asset_dir};
use remote_playground::rewrite::{rewrite_bundle, verify_rewritten, Allowlist, NameMap, RewriteReport};

fn main() {
    let map = NameMap::default();
    let allow = Allowlist::default();
    for name in ["click", "widgets", "sneaky"] {
        let raw = assemble_file(&asset_dir().join(format!("applets/{name}.mcfa"))).unwrap();
        let (out, report) = rewrite_bundle(&raw, &map).unwrap();
        let check = verify_rewritten(&out, &allow).unwrap();
        let report = RewriteReport {
            residuals: check.residuals,
            ..report
        };
        println!("== {name}: {} substitutions", report.substitution_count());
        print!("{}", report.to_text());
        let (again, _) = rewrite_bundle(&out, &map).unwrap();
        assert_eq!(again, out);
    }
}
