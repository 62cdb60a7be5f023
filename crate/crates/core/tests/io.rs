mod common;

use std::path::{Path, PathBuf};

use common::{rand_tensor, seeded};
use proptest::prelude::*;
use vpr_core::error::Error;
use vpr_core::geo::{geo_distance, Coordinate};
use vpr_core::io::{
    generate_fixture, load_label_map, read_pgm, render_fixture, save_label_map, write_pgm, Dataset, Domain,
    FixtureSpec, LabelMap, Manifest, Record, Role, FIXTURE_CLASSES,
};
use vpr_core::mining::MiningPolicy;
use vpr_core::tensor::{read_tensor, write_tensor};

fn parse(text: &str) -> Result<Manifest, Error> {
    Manifest::parse(text.as_bytes(), PathBuf::from("/d"), Path::new("m.csv"))
}

fn small(seed: u64, shift: f64) -> FixtureSpec {
    FixtureSpec {
        seed,
        places: 2,
        views: 2,
        height: 32,
        width: 32,
        domain_shift: shift,
        ..FixtureSpec::default()
    }
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn manifest_examples() {
    let m = parse(
        "id,path,coord_a,coord_b,role,domain\n\
         1,a.vprt,0,0,gallery,source\n\
         2,b.vprt,5,0,query,target\n",
    )
    .unwrap();
    assert_eq!(m.records.len(), 2);
    assert_eq!(m.get(2).unwrap().domain, Domain::Target);

    let dup = parse(
        "id,path,coord_a,coord_b,role,domain\n\
         1,a.vprt,0,0,gallery,source\n\
         1,b.vprt,5,0,query,target\n",
    )
    .unwrap_err();
    assert!(matches!(dup, Error::Manifest { line: 3, .. }), "{dup}");
    assert!(dup.to_string().contains('3'));

    // labels present iff source train
    let stray = parse(
        "id,path,coord_a,coord_b,role,domain,labels\n\
         1,a.vprt,0,0,gallery,source,a.pgm\n",
    );
    assert!(stray.is_err());
    assert!(parse("id,path,coord_a,coord_b,role\n1,a,0,0,query\n").is_err());
}

#[test]
fn manifest_loads_from_disk_with_base_dir() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(
        &path,
        "id,path,coord_a,coord_b,role,domain\n4,img/4.vprt,1.5,2,query,source\n",
    )
    .unwrap();
    let m = Manifest::load(&path).unwrap();
    assert_eq!(m.resolve(&m.get(4).unwrap().path), dir.path().join("img/4.vprt"));
    let missing = Manifest::load(dir.path().join("nope.csv"));
    assert!(missing.is_err());
}

#[test]
fn label_map_examples() {
    let zeros = LabelMap::new(3, 4, vec![0; 12]).unwrap();
    let mut bytes = Vec::new();
    write_pgm(&mut bytes, &zeros).unwrap();
    let back = read_pgm(bytes.as_slice()).unwrap();
    assert!(back.data.iter().all(|&v| v == 0));
    assert_eq!((back.height, back.width), (3, 4));

    let ignore = LabelMap::new(1, 2, vec![255, 16]).unwrap();
    assert!(ignore.validate(17).is_ok());
    let bad = LabelMap::new(1, 2, vec![40, 0]).unwrap();
    assert!(matches!(bad.validate(17), Err(Error::Domain(_))));

    assert!(read_pgm(&b"P2\n1 1\n255\n0"[..]).is_err(), "ASCII PGM");
    assert!(read_pgm(&b"P5\n2 2\n255\n\x00\x01"[..]).is_err(), "short payload");
    assert!(read_pgm(&b"P5\n1 1\n65535\n\x00\x00"[..]).is_err(), "16-bit PGM");
}

#[test]
fn label_map_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let map = LabelMap::new(2, 3, vec![0, 1, 2, 255, 16, 9]).unwrap();
    let p = dir.path().join("l.pgm");
    save_label_map(&p, &map).unwrap();
    let first = std::fs::read(&p).unwrap();
    let back = load_label_map(&p).unwrap();
    assert_eq!(back, map);
    save_label_map(&p, &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);
}

#[test]
fn tensor_file_round_trip() {
    let mut rng = seeded(4);
    let t = rand_tensor(&mut rng, &[3, 5, 7], -10.0, 10.0);
    let mut a = Vec::new();
    write_tensor(&mut a, &t).unwrap();
    let back = read_tensor(a.as_slice()).unwrap();
    assert_eq!(back, t);
    let mut b = Vec::new();
    write_tensor(&mut b, &back).unwrap();
    assert_eq!(a, b);
    assert!(read_tensor(&a[..a.len() - 1]).is_err());
    let mut wrong = a.clone();
    wrong[4] = 9;
    assert!(matches!(read_tensor(wrong.as_slice()), Err(Error::Format { .. })));
}

#[test]
fn fixture_counts() {
    let fx = render_fixture(&small(1, 0.3)).unwrap();
    let n = |ds: &Dataset, d, r| ds.ids(d, &[r]).len();
    assert_eq!(n(&fx.source, Domain::Source, Role::Train), 4);
    assert_eq!(n(&fx.source, Domain::Source, Role::Query), 4);
    assert_eq!(n(&fx.target, Domain::Target, Role::Gallery), 4);
    assert_eq!(n(&fx.target, Domain::Target, Role::Query), 4);
    let labelled = fx
        .source
        .manifest()
        .records
        .iter()
        .filter(|r| r.labels.is_some())
        .count();
    assert_eq!(labelled, 4, "two label maps per place");
    for id in fx.source.ids(Domain::Source, &[Role::Train]) {
        let lab = fx.source.labels(id).unwrap();
        let (_, h, w) = fx.source.image(id).unwrap().chw().unwrap();
        assert_eq!((lab.height, lab.width), (h, w));
        lab.validate(FIXTURE_CLASSES).unwrap();
    }
}

#[test]
fn zero_shift_gives_identical_domains() {
    let fx = render_fixture(&small(2, 0.0)).unwrap();
    for r in &fx.source.manifest().records {
        let twin = r.id + 8;
        assert_eq!(fx.source.image(r.id).unwrap(), fx.target.image(twin).unwrap());
        assert_eq!(r.coord, fx.target.record(twin).unwrap().coord);
    }
    let shifted = render_fixture(&small(2, 0.3)).unwrap();
    assert_ne!(shifted.source.image(0).unwrap(), shifted.target.image(8).unwrap());
}

#[test]
fn fixture_geometry_fits_mining_radii() {
    let policy = MiningPolicy::default();
    let fx = render_fixture(&FixtureSpec {
        places: 8,
        views: 4,
        height: 16,
        width: 16,
        ..FixtureSpec::default()
    })
    .unwrap();
    let recs: Vec<&Record> = fx.source.manifest().records.iter().collect();
    let place = |r: &Record| (r.id % 32) / 4;
    for a in &recs {
        for b in &recs {
            let d = geo_distance(&a.coord, &b.coord).unwrap();
            if place(a) == place(b) {
                assert!(d < policy.positive_radius_m, "{} {} {d}", a.id, b.id);
            } else {
                assert!(
                    d > policy.negative_exclusion_radius_m.max(100.0),
                    "{} {} {d}",
                    a.id,
                    b.id
                );
            }
        }
    }
    assert!(matches!(recs[0].coord, Coordinate::Utm { .. }));
}

#[test]
fn fixture_files_are_deterministic_and_load_back() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small(5, 0.3);
    let files = generate_fixture(&spec, a.path()).unwrap();
    generate_fixture(&spec, b.path()).unwrap();
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa.len(), 2 + 16 + 4);
    assert_eq!(fa, fb);

    let fx = render_fixture(&spec).unwrap();
    let loaded = Dataset::load(Manifest::load(&files.source_manifest).unwrap(), FIXTURE_CLASSES).unwrap();
    for r in &fx.source.manifest().records {
        assert_eq!(loaded.image(r.id).unwrap(), fx.source.image(r.id).unwrap());
        assert_eq!(loaded.labels(r.id), fx.source.labels(r.id));
    }
    let other = tempfile::tempdir().unwrap();
    generate_fixture(&small(6, 0.3), other.path()).unwrap();
    assert_ne!(files_under(other.path()), fa, "seed must matter");
}

#[test]
fn fixture_rejects_degenerate_specs() {
    for spec in [
        FixtureSpec {
            places: 0,
            ..small(1, 0.1)
        },
        FixtureSpec {
            height: 4,
            ..small(1, 0.1)
        },
        FixtureSpec {
            domain_shift: -1.0,
            ..small(1, 0.1)
        },
    ] {
        assert!(render_fixture(&spec).is_err());
    }
}

fn arb_record() -> impl Strategy<Value = (u64, f64, f64, u8, bool)> {
    (0u64..1_000_000, -1e5f64..1e5, -1e5f64..1e5, 0u8..5, any::<bool>())
}

proptest! {
    #[test]
    fn manifest_round_trip(rows in prop::collection::vec(arb_record(), 1..20), deg in any::<bool>()) {
        let mut seen = std::collections::BTreeSet::new();
        let mut records = Vec::new();
        for (id, a, b, kind, _) in rows {
            if !seen.insert(id) {
                continue;
            }
            let (role, domain) = [
                (Role::Train, Domain::Source),
                (Role::Gallery, Domain::Source),
                (Role::Query, Domain::Source),
                (Role::Gallery, Domain::Target),
                (Role::Query, Domain::Target),
            ][usize::from(kind)];
            records.push(Record {
                id,
                path: PathBuf::from(format!("img/{id}.vprt")),
                coord: if deg { Coordinate::lat_lon(a / 2e3, b / 1e3) } else { Coordinate::utm(a, b) },
                role,
                domain,
                labels: (role == Role::Train).then(|| PathBuf::from(format!("lab/{id}.pgm"))),
            });
        }
        let m = Manifest::new(records, "/d").unwrap();
        let mut first = Vec::new();
        m.write(&mut first).unwrap();
        let back = Manifest::parse(first.as_slice(), PathBuf::from("/d"), Path::new("m.csv")).unwrap();
        prop_assert_eq!(&back.records, &m.records);
        let mut second = Vec::new();
        back.write(&mut second).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn pgm_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let map = LabelMap::new(h, w, (0..h * w).map(|_| rng.random()).collect()).unwrap();
        let mut a = Vec::new();
        write_pgm(&mut a, &map).unwrap();
        let back = read_pgm(a.as_slice()).unwrap();
        prop_assert_eq!(&back, &map);
        let mut b = Vec::new();
        write_pgm(&mut b, &back).unwrap();
        prop_assert_eq!(a, b);
    }
}
