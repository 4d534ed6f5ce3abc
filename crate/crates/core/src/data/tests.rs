use super::*;

fn world_with(x: f64, y: f64, vx: f64, vy: f64) -> SpriteWorld {
    SpriteWorld {
        height: 32,
        width: 32,
        sprites: vec![Sprite {
            x,
            y,
            vx,
            vy,
            size: 4,
            bitmap: vec![1.0; 16],
        }],
    }
}

#[test]
fn free_flight_advances_exactly() {
    let mut w = world_with(14.0, 14.0, 1.0, 0.0);
    for _ in 0..3 {
        w.advance();
    }
    assert_eq!(w.sprites[0].x, 17.0);
    assert_eq!(w.sprites[0].y, 14.0);
}

#[test]
fn wall_contact_mirrors_position_and_velocity() {
    // W - s = 28
    let mut w = world_with(27.0, 10.0, 2.0, 0.0);
    w.advance();
    assert_eq!((w.sprites[0].x, w.sprites[0].vx), (27.0, -2.0));
    let mut w = world_with(1.0, 10.0, -3.0, 0.0);
    w.advance();
    assert_eq!((w.sprites[0].x, w.sprites[0].vx), (2.0, 3.0));
    assert_eq!(reflect(29.5, 1.0, 28.0), (26.5, -1.0));
    assert_eq!(reflect(5.0, 1.0, 0.0), (0.0, 1.0));
}

#[test]
fn corner_hit_reflects_both_axes() {
    let mut w = world_with(27.0, 27.0, 2.0, 2.0);
    w.advance();
    let s = &w.sprites[0];
    assert_eq!((s.x, s.y, s.vx, s.vy), (27.0, 27.0, -2.0, -2.0));
}

#[test]
fn overlapping_sprites_composite_by_maximum() {
    let mut w = world_with(0.0, 0.0, 0.0, 0.0);
    w.sprites[0].bitmap = vec![0.3; 16];
    let mut bright = w.sprites[0].clone();
    bright.bitmap = vec![0.9; 16];
    bright.x = 2.0;
    w.sprites.push(bright);
    let img = w.render();
    assert_eq!(img[0], 0.3);
    assert_eq!(img[2], 0.9);
    assert_eq!(img[3 * 32 + 3], 0.9);
    assert_eq!(img[5], 0.9);
    assert_eq!(img[6], 0.0);
}

#[test]
fn rendering_rounds_to_the_nearest_pixel() {
    let w = world_with(3.6, 0.4, 0.0, 0.0);
    let img = w.render();
    assert_eq!(img[3], 0.0);
    assert_eq!(img[4], 1.0);
    assert_eq!(img[7], 1.0);
    assert_eq!(img[8], 0.0);
}

#[test]
fn glyphs_are_binary_and_distinct() {
    for style in [SpriteStyle::DigitGlyph, SpriteStyle::Block, SpriteStyle::Cross] {
        for s in [5, 8, 12, 16] {
            let g = glyph(style, s, 3);
            assert_eq!(g.len(), s * s);
            assert!(g.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(g.contains(&1.0));
        }
    }
    let digits: Vec<Vec<f32>> = (0..10).map(|d| glyph(SpriteStyle::DigitGlyph, 12, d)).collect();
    for a in 0..10 {
        for b in a + 1..10 {
            assert_ne!(digits[a], digits[b], "digits {a} and {b}");
        }
    }
}

fn cfg() -> DatasetConfig {
    DatasetConfig {
        height: 32,
        width: 32,
        sprite_size: 8,
        speed_min: 1.0,
        speed_max: 3.0,
        seq_len: 20,
        ..DatasetConfig::default()
    }
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        DatasetConfig { sprite_size: 40, ..cfg() },
        DatasetConfig { speed_min: 0.0, ..cfg() },
        DatasetConfig { speed_min: 4.0, ..cfg() },
        DatasetConfig { num_sprites: 0, ..cfg() },
        DatasetConfig { action_scale: -1.0, ..cfg() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn speed_is_conserved_and_sprites_stay_inside() {
    let c = cfg();
    let max = (c.width - c.sprite_size) as f64;
    for seed in 0..200 {
        let mut rng = Rng::new(seed);
        let mut w = SpriteWorld::random(&c, &mut rng).unwrap();
        let speeds: Vec<f64> = w.sprites.iter().map(|s| s.vx.hypot(s.vy)).collect();
        for _ in 0..50 {
            w.advance();
            for (s, &v0) in w.sprites.iter().zip(&speeds) {
                assert!((s.vx.hypot(s.vy) - v0).abs() <= 1e-9);
                assert!((0.0..=max).contains(&s.x) && (0.0..=max).contains(&s.y));
            }
        }
    }
}

#[test]
fn sequences_are_seed_deterministic() {
    let a = gen_sequence(&cfg(), &mut Rng::new(5)).unwrap();
    let b = gen_sequence(&cfg(), &mut Rng::new(5)).unwrap();
    let c = gen_sequence(&cfg(), &mut Rng::new(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 20);
    assert!(a.actions.is_none());
    for f in &a.frames {
        assert_eq!(f.dims(), &[1, 1, 32, 32]);
        assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn initial_positions_cover_all_quadrants() {
    let c = cfg();
    let half = (c.width - c.sprite_size) as f64 / 2.0;
    let mut counts = [0usize; 4];
    for seed in 0..1000 {
        let w = SpriteWorld::random(&DatasetConfig { num_sprites: 1, ..c.clone() }, &mut Rng::new(seed)).unwrap();
        let s = &w.sprites[0];
        counts[(s.x >= half) as usize + 2 * (s.y >= half) as usize] += 1;
    }
    // χ² with 3 degrees of freedom, 0.999 quantile ≈ 16.27
    let chi2: f64 = counts.iter().map(|&n| (n as f64 - 250.0).powi(2) / 250.0).sum();
    assert!(chi2 < 16.27, "{counts:?}");
}

#[test]
fn action_mode_records_velocity_changes() {
    let c = DatasetConfig {
        action_scale: 0.5,
        ..cfg()
    };
    let seq = gen_sequence(&c, &mut Rng::new(7)).unwrap();
    let actions = seq.actions.as_ref().unwrap();
    assert_eq!(actions.len(), c.seq_len - 1);
    for a in actions {
        assert_eq!(a.dims(), &[1, ACTION_DIM]);
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
    }
    let mut w = world_with(10.0, 10.0, 2.0, 0.0);
    w.push([0.5, -0.5], 1.0, 3.0);
    assert_eq!((w.sprites[0].vx, w.sprites[0].vy), (2.5, -0.5));
    w.push([10.0, 0.0], 1.0, 3.0);
    assert!((w.sprites[0].vx.hypot(w.sprites[0].vy) - 3.0).abs() < 1e-12);
}

#[test]
fn batching_and_item_extraction_round_trip() {
    let mut rng = Rng::new(8);
    let c = DatasetConfig { action_scale: 0.3, ..cfg() };
    let seqs: Vec<FrameSequence> = (0..3).map(|_| gen_sequence(&c, &mut rng).unwrap()).collect();
    let batch = stack_sequences(&seqs).unwrap();
    assert_eq!(batch.frames[0].dims(), &[3, 1, 32, 32]);
    assert_eq!(batch.actions.as_ref().unwrap()[0].dims(), &[3, 2]);
    for (n, s) in seqs.iter().enumerate() {
        assert_eq!(&sequence_item(&batch, n).unwrap(), s);
    }
    let g = gen_batch(&c, 3, &mut Rng::new(8)).unwrap();
    assert_eq!(g, batch);
}

#[test]
fn context_target_split() {
    let seq = gen_sequence(&cfg(), &mut Rng::new(9)).unwrap();
    let (ctx, tgt) = split_context_target(&seq, 10, 10).unwrap();
    assert_eq!((ctx.len(), tgt.len()), (10, 10));
    assert_eq!(tgt[0], seq.frames[10]);
    let (ctx, tgt) = split_context_target(&seq, 2, 10).unwrap();
    assert_eq!((ctx.len(), tgt.len()), (2, 10));
    assert_eq!(tgt[9], seq.frames[11]);
    let (ctx, tgt) = split_context_target(&seq, 7, 0).unwrap();
    assert_eq!((ctx.len(), tgt.len()), (7, 0));
    assert!(split_context_target(&seq, 15, 6).is_err());
}

#[test]
fn dataset_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.stpd");
    let c = DatasetConfig { seq_len: 5, ..cfg() };
    let mut rng = Rng::new(10);
    let mut seqs: Vec<FrameSequence> = (0..10).map(|_| gen_sequence(&c, &mut rng).unwrap()).collect();
    // non-binary values must survive too
    seqs[0].frames[0].data_mut()[0] = 0.123_456_79;
    save_dataset(&path, &seqs).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, HEADER_BYTES + 10 * 5 * 32 * 32 * 4);
    assert_eq!(load_dataset(&path).unwrap(), seqs);
}

#[test]
fn damaged_dataset_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.stpd");
    let seqs = vec![gen_sequence(&DatasetConfig { seq_len: 3, ..cfg() }, &mut Rng::new(11)).unwrap()];
    save_dataset(&path, &seqs).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    std::fs::write(&path, &bytes[..10]).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Format(_))));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    std::fs::write(&path, &bad_version).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Format(_))));

    let mut bad_magic = bytes;
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Format(_))));

    assert!(matches!(
        load_dataset(&dir.path().join("missing")),
        Err(Error::Io(_))
    ));
}
